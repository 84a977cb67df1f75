import json
import subprocess
import sys

import numpy as np
import pytest

from moslab.adapter_file import load
from moslab.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_budget_7b(capsys, tmp_path):
    code, out, _ = run(capsys, "budget", "--dims-preset", "7b", "--rank", "2", "--json", str(tmp_path / "b.json"))
    assert code == 0
    assert "lora_params: 4,997,120 (~5.00M)" in out
    assert "pool_rank[query]: 64" in out
    doc = json.loads((tmp_path / "b.json").read_text())
    assert doc["lora_params"] == 4_997_120 and doc["equivalent_rank"] == 2
    code, out, _ = run(capsys, "budget", "--rank", "8")
    assert "19,988,480 (~19.99M)" in out


def test_budget_infeasible(capsys):
    code, _, err = run(capsys, "budget", "--budget", "1000")
    assert code == 1 and err.startswith("error:") and "nearest feasible" in err


def test_diversity_and_serving(capsys):
    code, out, _ = run(capsys, "diversity", "--variant", "pure", "--L", "32", "--e", "2", "--r", "64")
    assert code == 0 and "combinations: 1\n" in out
    code, out, _ = run(capsys, "simulate-serving", "--tenants", "10000", "--rank", "16",
                       "--precision-bytes", "4", "--dims-preset", "70b-attn")
    assert "total_TB: 3.3554" in out
    assert "assumption: dims: attention projections" in out
    code, _, err = run(capsys, "simulate-serving", "--tenants", "3")
    assert code == 1


def test_file_workflow(capsys, tmp_path):
    f = tmp_path / "a.mos"
    code, out, _ = run(capsys, "init", "--dims-preset", "custom", "--layer", "q:8:8:3", "--layer", "v:8:12:3",
                       "--e", "2", "--rank", "3", "--l", "2", "--p", "1", "--out", str(f))
    assert code == 0 and "trainable_params: 2" in out
    assert load(f).param_count() == 2 * 3 * (16 + 20)
    code, out, _ = run(capsys, "validate", str(f))
    assert code == 0 and "valid: True" in out
    code, out, _ = run(capsys, "compose", str(f), "--layer-type", "v", "--block", "1",
                       "--out", str(tmp_path / "c.npz"))
    assert "A_shape: 3x8" in out and "B_shape: 12x3" in out
    assert np.load(tmp_path / "c.npz")["delta_w"].shape == (12, 8)
    code, out, _ = run(capsys, "merge", str(f), "--layer-type", "q", "--out", str(tmp_path / "m.npy"))
    assert "max_abs_change: 0.00000000e+00" in out
    run(capsys, "export", str(f), "--out", str(tmp_path / "a.json"))
    code, _, _ = run(capsys, "import", str(tmp_path / "a.json"), "--out", str(tmp_path / "b.mos"))
    assert code == 0
    assert (tmp_path / "b.mos").read_bytes() == f.read_bytes()


def test_corrupt_file_exits_nonzero(capsys, tmp_path):
    f = tmp_path / "a.mos"
    run(capsys, "init", "--out", str(f))
    data = bytearray(f.read_bytes())
    data[30] ^= 0xFF
    f.write_bytes(bytes(data))
    code, _, err = run(capsys, "validate", str(f))
    assert code == 1 and "CRC" in err


def test_train_and_ablate(capsys, tmp_path):
    code, out, _ = run(capsys, "train", "--variant", "lora", "--width", "8", "--blocks", "2", "--samples", "32",
                       "--steps", "20", "--log-every", "10", "--summary", str(tmp_path / "s.json"),
                       "--out", str(tmp_path / "t.mos"))
    assert code == 0 and "final_loss:" in out
    assert len(json.loads((tmp_path / "s.json").read_text())["loss_trace"]) == 20
    code, out, _ = run(capsys, "ablate", "--width", "8", "--blocks", "2", "--samples", "16", "--steps", "3",
                       "--rank", "2", "--summary", str(tmp_path / "a.json"))
    assert "mos-pd" in out
    assert json.loads((tmp_path / "a.json").read_text())["budgets_match"]


def test_usage_error_and_module_entry():
    with pytest.raises(SystemExit) as info:
        main(["budget", "--rank", "x"])
    assert info.value.code == 2
    proc = subprocess.run([sys.executable, "-m", "moslab", "diversity", "--variant", "subset",
                           "--L", "2", "--e", "2", "--r", "2"], capture_output=True, text=True)
    assert proc.returncode == 0 and "combinations: 6" in proc.stdout


@pytest.mark.parametrize("name", ["01_pools_and_routing.py", "02_budget_and_diversity.py"])
def test_fast_demos_run(name):
    from pathlib import Path
    demo = Path(__file__).resolve().parents[1] / "demos" / name
    proc = subprocess.run([sys.executable, str(demo)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
