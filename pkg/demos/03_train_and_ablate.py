"""
Training on a toy teacher and ablating the differentiation strategies
=====================================================================

Every variant gets the same number of trainable parameters. The teacher's
per-block updates have rank 4 while the budget matches LoRA at rank 2, so
the variants differ in how well they spend a budget that is too small.
"""

# %%
import numpy as np

from moslab.trainer import TrainRun, ablation_suite, make_task, train
from moslab.pool import variant_config

task = make_task()  # 16-wide, 4 blocks, teacher rank 4
print("task:", task.kind, task.dims, "samples", task.num_samples)

# %%
cfg = variant_config("mos", 2, task.num_blocks, rank=4, shards_per_vector=2, private_rank=1)
run = train(TrainRun(cfg, task, lr=1e-3, steps=1000, seed=0))
trace = np.array(run.loss_trace)
print("loss at steps 0, 100, 500, 999:", trace[[0, 100, 500, 999]])
print("final:", run.final_loss, "params:", run.state.param_count())

# %%
# Budget-matched comparison over 8 seeds (takes about a minute).
rep = ablation_suite(task, seeds=range(8))
print("\n".join(rep.lines()))
