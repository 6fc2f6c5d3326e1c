"""Persistent per-class prototype memory."""

from __future__ import annotations

import logging
import os
from typing import Callable, Iterable, Mapping

import numpy as np

from .checkpoint import dumps_slots, loads_slots

log = logging.getLogger(__name__)

DEFAULT_SAMPLE_CAP = 64


class PrototypeMemory:
    """Class id -> (prototype, episode of last refresh).

    Only training classes are written. ``refresh`` rebuilds the whole map and
    swaps it in one assignment, so readers never see a half-updated memory.
    """

    def __init__(self, allowed: Iterable[int] | None = None):
        self._entries: dict[int, tuple[np.ndarray, int]] = {}
        self.allowed = None if allowed is None else frozenset(int(y) for y in allowed)
        self.skipped: list[tuple[int, int]] = []

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, y: int) -> bool:
        return y in self._entries

    def has(self, y: int) -> bool:
        return y in self._entries

    def classes(self) -> list[int]:
        return sorted(self._entries)

    def fetch(self, y: int) -> np.ndarray | None:
        entry = self._entries.get(y)
        if entry is None:
            return None
        vec = entry[0].view()
        vec.flags.writeable = False
        return vec

    def stamp(self, y: int) -> int | None:
        entry = self._entries.get(y)
        return None if entry is None else entry[1]

    def as_dict(self) -> dict[int, np.ndarray]:
        return {y: self._entries[y][0] for y in sorted(self._entries)}

    def put(self, y: int, vec: np.ndarray, episode: int) -> None:
        y = int(y)
        if self.allowed is not None and y not in self.allowed:
            raise KeyError(f"class {y} is not a training class; refusing to store it")
        vec = np.array(vec, dtype=np.float64)
        if not np.all(np.isfinite(vec)):
            raise ValueError(f"non-finite prototype for class {y}")
        old = self._entries.get(y)
        if old is not None and episode < old[1]:
            raise ValueError(f"refresh stamp went backwards for class {y}")
        self._entries[y] = (vec, int(episode))

    def refresh(self, embed_fn: Callable[[np.ndarray], np.ndarray],
                pools: Mapping[int, np.ndarray], episode: int,
                rng: np.random.Generator, cap: int = DEFAULT_SAMPLE_CAP,
                classes: Iterable[int] | None = None) -> None:
        """Recompute prototypes as mean embeddings of up to ``cap`` samples.

        ``classes`` limits which classes refresh (defaults to every pool).
        All selected samples are embedded in a single batch.
        """
        ids = sorted(pools if classes is None else classes)
        chunks, owners = [], []
        for y in ids:
            pool = pools.get(y)
            if pool is None or len(pool) == 0:
                self.skipped.append((y, episode))
                log.warning("memory refresh at episode %d: class %d has no samples", episode, y)
                continue
            if len(pool) > cap:
                pick = np.sort(rng.choice(len(pool), size=cap, replace=False))
                pool = pool[pick]
            chunks.append(pool)
            owners.append((y, len(pool)))
        if not chunks:
            return
        emb = embed_fn(np.concatenate(chunks, axis=0))
        fresh = dict(self._entries)
        start = 0
        for y, n in owners:
            vec = emb[start:start + n].mean(axis=0)
            start += n
            if self.allowed is not None and y not in self.allowed:
                raise KeyError(f"class {y} is not a training class; refusing to store it")
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"non-finite prototype for class {y}")
            fresh[y] = (vec, int(episode))
        self._entries = fresh

    # -- snapshots -----------------------------------------------------------

    def to_bytes(self) -> bytes:
        slots = {f"memory/{y}": self._entries[y][0] for y in sorted(self._entries)}
        slots["memory_stamps"] = np.array(
            [[y, self._entries[y][1]] for y in sorted(self._entries)], dtype=np.float64
        ).reshape(-1, 2)
        return dumps_slots(slots)

    @classmethod
    def from_bytes(cls, data: bytes, allowed: Iterable[int] | None = None) -> "PrototypeMemory":
        slots, _ = loads_slots(data)
        stamps = {int(y): int(s) for y, s in slots.pop("memory_stamps", np.zeros((0, 2)))}
        mem = cls(allowed)
        for name, vec in slots.items():
            if not name.startswith("memory/"):
                raise ValueError(f"unexpected slot {name!r} in memory snapshot")
            y = int(name.split("/", 1)[1])
            mem.put(y, vec, stamps.get(y, 0))
        return mem

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike, allowed: Iterable[int] | None = None) -> "PrototypeMemory":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), allowed)
