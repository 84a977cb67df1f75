import numpy as np
import pytest

from moslab.adapter_file import (
    MAGIC,
    export_json,
    from_bytes,
    import_json,
    load,
    save,
    to_bytes,
)
from moslab.composer import compose
from moslab.errors import LoadError, MosError
from moslab.pool import VARIANTS, IndexMatrix

from conftest import make_state


def states():
    for v in VARIANTS:
        yield make_state(v, h=8, o=12, L=3, e=2, rank=3 if v in ("mos", "subset_selection") else None,
                         l=2 if v == "mos" else 1, p=1 if v == "mos" else 0)


def assert_same(a, b, rtol):
    assert a.cfg == b.cfg
    assert a.structure_hash() == b.structure_hash()
    for name, la in a.layers.items():
        lb = b[name]
        for k in range(la.spec.num_blocks):
            ca, cb = compose(la, k, a.cfg), compose(lb, k, b.cfg)
            np.testing.assert_allclose(cb.A, ca.A, rtol=rtol, atol=0)
            np.testing.assert_allclose(cb.B, ca.B, rtol=rtol, atol=0)


@pytest.mark.parametrize("state", list(states()), ids=VARIANTS)
def test_binary_round_trip(state, tmp_path):
    path = save(state, tmp_path / "a.mos")
    back = load(path)
    assert_same(state, back, rtol=1e-6)
    assert to_bytes(back) == path.read_bytes()


@pytest.mark.parametrize("state", list(states()), ids=VARIANTS)
def test_json_round_trip_is_exact(state, tmp_path):
    back = import_json(export_json(state, tmp_path / "a.json"))
    assert_same(state, back, rtol=0)


def test_identical_states_identical_bytes():
    assert to_bytes(make_state("mos", rank=2, seed=4)) == to_bytes(make_state("mos", rank=2, seed=4))


def test_corruption_is_rejected():
    data = to_bytes(make_state("mos", rank=2, l=2, p=1))
    with pytest.raises(LoadError, match="magic"):
        from_bytes(b"XXXX" + data[4:])
    flipped = bytearray(data)
    flipped[40] ^= 0x01
    with pytest.raises(LoadError, match="CRC"):
        from_bytes(bytes(flipped))
    with pytest.raises(LoadError):
        from_bytes(data[:-9])
    with pytest.raises(LoadError):
        from_bytes(b"MOS")


def test_invariant_violation_with_valid_crc_is_rejected():
    import struct
    import zlib
    state = make_state("mos", rank=2, l=2, p=1)
    ls = state["proj"]
    bad = ls.index_a[0].entries.copy()
    bad[0, 0] = ls.pool_a.num_shards + 5
    ls.index_a[0] = IndexMatrix(0, "A", bad)
    with pytest.raises(MosError):
        save(state, "/dev/null")
    body = to_bytes(state)[:-4]
    with pytest.raises(LoadError, match="invariant"):
        from_bytes(body + struct.pack("<I", zlib.crc32(body)))


def test_bad_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(LoadError):
        import_json(p)
    p.write_text('{"config": {}}')
    with pytest.raises(LoadError):
        import_json(p)
    with pytest.raises(LoadError):
        load(tmp_path / "missing.mos")
    assert MAGIC == b"MOS1"
