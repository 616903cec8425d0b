"""Binary checkpoint format: named parameters, Adam state, rng position.

Layout (all integers little-endian unless noted):
  magic "TZKF" | u32 version | 32-byte config fingerprint (sha256)
  u64 seed | u64 next_step
  u8 has_adam [| u64 adam_step | f64 lr beta1 beta2 eps]
  parameter table | adam m table | adam v table (tables only when has_adam)

A table is u32 count followed by entries:
  u16 name length | UTF-8 name | u8 rank | u32 x rank dims
  u8 dtype tag (0=f32, 1=f64) | raw little-endian values

Round-trips are bit-identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

MAGIC = b"TZKF"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def _write_entry(out, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    out.append(struct.pack("<H", len(nb)))
    out.append(nb)
    out.append(struct.pack("<B", arr.ndim))
    out.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
    tag = _TAGS[np.dtype(arr.dtype)]
    out.append(struct.pack("<B", tag))
    out.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())


def _write_table(out, table: dict):
    out.append(struct.pack("<I", len(table)))
    for name, arr in table.items():
        _write_entry(out, name, np.asarray(arr))


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=self.pos)
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _read_table(r: _Reader) -> dict:
    (count,) = r.unpack("<I", "table size")
    table = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "name").decode("utf-8")
        (rank,) = r.unpack("<B", "rank")
        dims = r.unpack(f"<{rank}I", "dims") if rank else ()
        (tag,) = r.unpack("<B", "dtype tag")
        if tag not in _DTYPES:
            raise FormatError(f"unknown dtype tag {tag}", offset=r.pos - 1)
        dt = _DTYPES[tag]
        n = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(r.take(n * dt.itemsize, f"values of {name}"), dtype=dt)
        table[name] = data.reshape(dims).astype(dt.base)
    return table


@dataclass
class CheckpointData:
    fingerprint: bytes
    seed: int
    next_step: int
    params: dict
    adam_step: int = 0
    adam_hyper: tuple = (1e-4, 0.9, 0.999, 1e-8)
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    has_adam: bool = False


def save(path, fingerprint: bytes, seed: int, next_step: int, params: dict,
         adam=None) -> None:
    if len(fingerprint) != 32:
        raise FormatError("config fingerprint must be 32 bytes", offset=None)
    out = [MAGIC, struct.pack("<I", VERSION), fingerprint,
           struct.pack("<QQ", seed, next_step)]
    if adam is None:
        out.append(struct.pack("<B", 0))
        _write_table(out, {k: v.data for k, v in params.items()})
    else:
        out.append(struct.pack("<B", 1))
        out.append(struct.pack("<Q", adam.step))
        out.append(struct.pack("<4d", adam.lr, adam.beta1, adam.beta2, adam.eps))
        _write_table(out, {k: v.data for k, v in params.items()})
        _write_table(out, adam.m)
        _write_table(out, adam.v)
    blob = b"".join(out)
    with open(path, "wb") as fh:
        fh.write(blob)


def load(path) -> CheckpointData:
    with open(path, "rb") as fh:
        raw = fh.read()
    r = _Reader(raw)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    fingerprint = r.take(32, "fingerprint")
    seed, next_step = r.unpack("<QQ", "rng state")
    (has_adam,) = r.unpack("<B", "adam flag")
    ck = CheckpointData(fingerprint=fingerprint, seed=seed, next_step=next_step, params={})
    if has_adam:
        (ck.adam_step,) = r.unpack("<Q", "adam step")
        ck.adam_hyper = r.unpack("<4d", "adam hyperparameters")
        ck.has_adam = True
    ck.params = _read_table(r)
    if has_adam:
        ck.adam_m = _read_table(r)
        ck.adam_v = _read_table(r)
    if r.pos != len(raw):
        raise FormatError("trailing bytes after checkpoint payload", offset=r.pos)
    return ck


def restore_model(model, ck: CheckpointData) -> None:
    """Copy checkpoint parameters into the model, names must match exactly."""
    params = model.named_parameters()
    missing = sorted(set(params) - set(ck.params))
    extra = sorted(set(ck.params) - set(params))
    if missing or extra:
        raise FormatError(f"parameter mismatch: missing {missing[:3]}, extra {extra[:3]}", offset=None)
    for name, p in params.items():
        arr = ck.params[name]
        if tuple(arr.shape) != tuple(p.shape):
            raise FormatError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}", offset=None)
        p.data = arr.astype(p.data.dtype)


def restore_adam(ck: CheckpointData):
    from .trainer import AdamState
    lr, b1, b2, eps = ck.adam_hyper
    return AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, step=ck.adam_step,
                     m=dict(ck.adam_m), v=dict(ck.adam_v))
