"""Binary slot container used for parameter checkpoints and memory snapshots.

Layout (all integers little-endian)::

    magic  b"GPNS"  | version u32 | slot count u32
    per slot:  name_len u32 | name utf-8 | rank u32 | dims u64 * rank | f64 values (row-major)
    moments:   flag u32 (0 = absent, 1 = present)
               per slot, same order: adam step u64 | first moment f64s | second moment f64s
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO, Mapping

import numpy as np

from .autodiff import ParameterStore

MAGIC = b"GPNS"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_array(fh: BinaryIO, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def _read_array(fh: BinaryIO, shape: tuple) -> np.ndarray:
    count = int(np.prod(shape, dtype=np.int64))
    raw = _read_exact(fh, 8 * count)
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def dumps_slots(slots: Mapping[str, np.ndarray], moments: Mapping[str, tuple] | None = None) -> bytes:
    fh = io.BytesIO()
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, len(slots)))
    for name, arr in slots.items():
        arr = np.asarray(arr, dtype=np.float64)
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<I", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        _write_array(fh, arr)
    if moments is None:
        fh.write(struct.pack("<I", 0))
    else:
        fh.write(struct.pack("<I", 1))
        for name, arr in slots.items():
            step, m, v = moments[name]
            fh.write(struct.pack("<Q", step))
            _write_array(fh, np.broadcast_to(m, np.shape(arr)))
            _write_array(fh, np.broadcast_to(v, np.shape(arr)))
    return fh.getvalue()


def loads_slots(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, tuple] | None]:
    fh = io.BytesIO(data)
    if _read_exact(fh, 4) != MAGIC:
        raise CheckpointError("bad magic: not a GPN slot file")
    version, count = struct.unpack("<II", _read_exact(fh, 8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    slots: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
        name = _read_exact(fh, name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(fh, 4))
        dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
        slots[name] = _read_array(fh, tuple(dims))
    (flag,) = struct.unpack("<I", _read_exact(fh, 4))
    moments = None
    if flag == 1:
        moments = {}
        for name, arr in slots.items():
            (step,) = struct.unpack("<Q", _read_exact(fh, 8))
            m = _read_array(fh, arr.shape)
            v = _read_array(fh, arr.shape)
            moments[name] = (step, m, v)
    elif flag != 0:
        raise CheckpointError(f"bad moments flag {flag}")
    if fh.read(1):
        raise CheckpointError("trailing bytes after checkpoint")
    return slots, moments


def save_store(path: str | os.PathLike, store: ParameterStore) -> None:
    moments = {n: (store.adam_t[n], store.adam_m[n], store.adam_v[n]) for n in store.values}
    with open(path, "wb") as fh:
        fh.write(dumps_slots(store.values, moments))


def load_store(path: str | os.PathLike) -> ParameterStore:
    with open(path, "rb") as fh:
        slots, moments = loads_slots(fh.read())
    store = ParameterStore()
    for name, arr in slots.items():
        store.add(name, arr)
        if moments is not None:
            step, m, v = moments[name]
            store.adam_t[name] = step
            store.adam_m[name] = m.copy()
            store.adam_v[name] = v.copy()
    return store
