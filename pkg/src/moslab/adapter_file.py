"""Bit-exact binary adapter checkpoints (``.mos`` files).

All integers and reals are little-endian. Layout, in order::

    magic            4 bytes  b"MOS1"
    version          u32      FORMAT_VERSION
    config           u32 r, u32 l, u32 p, u32 e, f64 alpha, f64 dropout,
                     u8 variant code, u8 dissociate, i64 seed,
                     u32 num_layer_types
    per layer type   u16 name_len, name (utf-8), u32 h, u32 o, u32 L
    pool blocks      per layer type, side A then B:
                     u32 num_public, u32 num_private, u32 shard_len,
                     f32[num_shards * shard_len] row-major
    index blocks     per layer type, per block k, side A then B:
                     u32 l, u32 r, u32[l * r] row-major
    extra blocks     per layer type: u8 kind (0 none, 1 scalars, 2 masks),
                     then u32 L, u32 n and L*n values (f64 scalars or u8 mask bits)
    crc              u32      CRC-32 (IEEE) of every preceding byte

Pools are stored as float32 although all arithmetic is float64, so a
round trip reproduces pool values to float32 precision and everything else
exactly.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ConfigError, LoadError, MosError
from .pool import (
    VARIANTS,
    IndexMatrix,
    LayerState,
    LayerTypeSpec,
    MosConfig,
    MosState,
    ScalingVector,
    ShardPool,
    validate,
)

MAGIC = b"MOS1"
FORMAT_VERSION = 1
_EXTRA_NONE, _EXTRA_SCALARS, _EXTRA_MASKS = 0, 1, 2


def to_bytes(state: MosState) -> bytes:
    cfg = state.cfg
    out = bytearray(MAGIC)
    out += struct.pack("<I", FORMAT_VERSION)
    out += struct.pack(
        "<IIIIddBBqI",
        cfg.rank, cfg.shards_per_vector, cfg.private_rank, cfg.equivalent_rank,
        cfg.alpha, cfg.dropout, VARIANTS.index(cfg.variant), int(cfg.dissociate),
        cfg.seed, len(state.layers),
    )
    for ls in state.layers.values():
        name = ls.spec.name.encode("utf-8")
        out += struct.pack("<H", len(name)) + name
        out += struct.pack("<III", ls.spec.in_dim, ls.spec.out_dim, ls.spec.num_blocks)
    for ls in state.layers.values():
        for pool in (ls.pool_a, ls.pool_b):
            out += struct.pack("<III", pool.num_public, pool.num_private, pool.shard_len)
            out += np.ascontiguousarray(pool.data, dtype="<f4").tobytes()
    for ls in state.layers.values():
        for ia, ib in zip(ls.index_a, ls.index_b):
            for im in (ia, ib):
                l, r = im.shape
                out += struct.pack("<II", l, r)
                out += np.ascontiguousarray(im.entries, dtype="<u4").tobytes()
    for ls in state.layers.values():
        if ls.scalars:
            vals = np.stack([s.values for s in ls.scalars])
            out += struct.pack("<BII", _EXTRA_SCALARS, *vals.shape)
            out += np.ascontiguousarray(vals, dtype="<f8").tobytes()
        elif ls.masks:
            vals = np.stack([m.values for m in ls.masks])
            out += struct.pack("<BII", _EXTRA_MASKS, *vals.shape)
            out += np.ascontiguousarray(vals, dtype="u1").tobytes()
        else:
            out += struct.pack("<B", _EXTRA_NONE)
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise LoadError(f"unexpected end of data at byte {self.pos} (need {n} more)")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        return np.frombuffer(self.take(size), dtype=dtype, count=count)


def from_bytes(data: bytes) -> MosState:
    """Parse and strictly validate a serialized state.

    Raises:
        LoadError: bad magic, version, CRC, truncated data, or any violated
            pool/index invariant. Nothing is repaired.
    """
    if len(data) < 12:
        raise LoadError("file too short to be an adapter file")
    if data[:4] != MAGIC:
        raise LoadError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise LoadError("CRC-32 mismatch: file is corrupted or truncated")
    rd = _Reader(body)
    rd.take(4)
    (version,) = rd.unpack("<I")
    if version != FORMAT_VERSION:
        raise LoadError(f"unsupported format version {version}")
    r, l, p, e, alpha, dropout, vcode, dissoc, seed, ntypes = rd.unpack("<IIIIddBBqI")
    if vcode >= len(VARIANTS):
        raise LoadError(f"unknown variant code {vcode}")
    try:
        cfg = MosConfig(rank=r, equivalent_rank=e, shards_per_vector=l, private_rank=p,
                        variant=VARIANTS[vcode], alpha=alpha, dropout=dropout, seed=seed,
                        dissociate=bool(dissoc))
        specs = []
        for _ in range(ntypes):
            (nlen,) = rd.unpack("<H")
            name = rd.take(nlen).decode("utf-8")
            h, o, L = rd.unpack("<III")
            specs.append(LayerTypeSpec(name, h, o, L))
    except (ConfigError, UnicodeDecodeError) as exc:
        raise LoadError(f"invalid config block: {exc}") from exc

    pools = []
    for spec in specs:
        pair = []
        for side in ("A", "B"):
            npub, npriv, slen = rd.unpack("<III")
            vals = rd.array("<f4", (npub + npriv) * slen).astype(np.float64)
            pair.append(ShardPool(side, slen, npub, npriv, vals.reshape(npub + npriv, slen)))
        pools.append(pair)
    indices = []
    for spec in specs:
        ia, ib = [], []
        for k in range(spec.num_blocks):
            for side, dest in (("A", ia), ("B", ib)):
                il, ir = rd.unpack("<II")
                entries = rd.array("<u4", il * ir).astype(np.int64).reshape(il, ir)
                dest.append(IndexMatrix(k, side, entries))
        indices.append((ia, ib))
    layers = {}
    for spec, (pa, pb), (ia, ib) in zip(specs, pools, indices):
        (kind,) = rd.unpack("<B")
        scalars = masks = None
        if kind == _EXTRA_SCALARS:
            nL, n = rd.unpack("<II")
            vals = rd.array("<f8", nL * n).reshape(nL, n)
            scalars = [ScalingVector(k, vals[k]) for k in range(nL)]
        elif kind == _EXTRA_MASKS:
            nL, n = rd.unpack("<II")
            vals = rd.array("u1", nL * n).reshape(nL, n).astype(bool)
            masks = [ScalingVector(k, vals[k]) for k in range(nL)]
        elif kind != _EXTRA_NONE:
            raise LoadError(f"unknown extra block kind {kind}")
        if spec.name in layers:
            raise LoadError(f"duplicate layer type {spec.name!r}")
        layers[spec.name] = LayerState(spec, pa, pb, ia, ib, scalars=scalars, masks=masks)
    if rd.pos != len(body):
        raise LoadError(f"{len(body) - rd.pos} trailing bytes before CRC")

    state = MosState(cfg, layers)
    report = validate(state)
    if not report.ok:
        raise LoadError("invariant violation:\n" + "\n".join(
            f"  {c.name}: {c.detail}" for c in report.failures))
    return state


def save(state: MosState, path: str | Path) -> Path:
    """Write ``state`` to ``path``; identical states give identical bytes."""
    path = Path(path)
    report = validate(state)
    if not report.ok:
        raise MosError("refusing to save an invalid state:\n" + str(report))
    path.write_bytes(to_bytes(state))
    return path


def load(path: str | Path) -> MosState:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    return from_bytes(data)


def to_json_dict(state: MosState) -> dict:
    """Human-readable full-precision export of a state."""
    cfg = state.cfg
    return {
        "format": "moslab-json",
        "config": {
            "rank": cfg.rank, "equivalent_rank": cfg.equivalent_rank,
            "shards_per_vector": cfg.shards_per_vector, "private_rank": cfg.private_rank,
            "variant": cfg.variant, "alpha": cfg.alpha, "dropout": cfg.dropout,
            "seed": cfg.seed, "dissociate": cfg.dissociate,
        },
        "layers": [
            {
                "name": ls.spec.name, "in_dim": ls.spec.in_dim, "out_dim": ls.spec.out_dim,
                "num_blocks": ls.spec.num_blocks,
                "pools": {
                    p.side: {"num_public": p.num_public, "num_private": p.num_private,
                             "shard_len": p.shard_len, "data": p.data.tolist()}
                    for p in (ls.pool_a, ls.pool_b)
                },
                "index_a": [im.entries.tolist() for im in ls.index_a],
                "index_b": [im.entries.tolist() for im in ls.index_b],
                "scalars": [s.values.tolist() for s in ls.scalars] if ls.scalars else None,
                "masks": [m.values.astype(int).tolist() for m in ls.masks] if ls.masks else None,
            }
            for ls in state.layers.values()
        ],
    }


def from_json_dict(doc: dict) -> MosState:
    try:
        cfg = MosConfig(**doc["config"])
        layers = {}
        for ld in doc["layers"]:
            spec = LayerTypeSpec(ld["name"], ld["in_dim"], ld["out_dim"], ld["num_blocks"])
            pools = {}
            for side in ("A", "B"):
                pd = ld["pools"][side]
                data = np.array(pd["data"], dtype=np.float64).reshape(-1, pd["shard_len"])
                pools[side] = ShardPool(side, pd["shard_len"], pd["num_public"], pd["num_private"], data)
            ia = [IndexMatrix(k, "A", e) for k, e in enumerate(ld["index_a"])]
            ib = [IndexMatrix(k, "B", e) for k, e in enumerate(ld["index_b"])]
            scalars = [ScalingVector(k, np.array(v, dtype=np.float64))
                       for k, v in enumerate(ld["scalars"])] if ld.get("scalars") else None
            masks = [ScalingVector(k, np.array(v, dtype=bool))
                     for k, v in enumerate(ld["masks"])] if ld.get("masks") else None
            layers[spec.name] = LayerState(spec, pools["A"], pools["B"], ia, ib, scalars, masks)
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"malformed JSON adapter: {exc}") from exc
    state = MosState(cfg, layers)
    report = validate(state)
    if not report.ok:
        raise LoadError("invariant violation:\n" + str(report))
    return state


def export_json(state: MosState, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(to_json_dict(state), indent=1))
    return path


def import_json(path: str | Path) -> MosState:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"cannot read JSON adapter {path}: {exc}") from exc
    return from_json_dict(doc)
