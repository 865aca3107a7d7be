"""Streaming memory: recent-window placeholder, reservoir buffer, episodic draws."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import _read_packed, _write_packed


@dataclass
class MemoryEntry:
    """One labelled sample: ``x`` is ``[L, N, d]``, ``y`` is ``[H, N, d]``.

    ``origin_time`` is the index of the last input step; the target covers the
    ``H`` steps right after it.
    """

    x: np.ndarray
    y: np.ndarray
    origin_time: int


class MemoryPlaceholder:
    """Ring buffer holding the latest ``L + H`` observations."""

    def __init__(self, lookback: int, horizon: int, shape: tuple[int, ...] | None = None):
        if lookback < 1 or horizon < 1:
            raise ValueError("lookback and horizon must be positive")
        self.lookback = lookback
        self.horizon = horizon
        self.capacity = lookback + horizon
        self.shape = tuple(shape) if shape is not None else None
        self._buf: deque[np.ndarray] = deque(maxlen=self.capacity)
        self.count = 0
        self.last_time: int | None = None

    def push(self, x_t, t: int | None = None) -> None:
        x_t = np.array(x_t, dtype=np.float64)
        if self.shape is None:
            self.shape = x_t.shape
        elif x_t.shape != self.shape:
            raise ValueError(f"observation shape {x_t.shape} != placeholder shape {self.shape}")
        self._buf.append(x_t)
        self.count += 1
        self.last_time = t if t is not None else self.count - 1

    def __len__(self) -> int:
        return len(self._buf)

    def contents(self) -> np.ndarray:
        return np.stack(list(self._buf)) if self._buf else np.empty((0,) + (self.shape or ()))

    @property
    def ready(self) -> bool:
        return len(self._buf) == self.capacity

    def extract(self) -> MemoryEntry | None:
        """Most recent fully observed sample, or ``None`` while history is short."""
        if not self.ready:
            return None
        window = self.contents()
        return MemoryEntry(
            x=window[: self.lookback],
            y=window[self.lookback:],
            origin_time=self.last_time - self.horizon,
        )

    def latest(self, n: int) -> np.ndarray | None:
        """The newest ``n`` observations stacked oldest-first."""
        if len(self._buf) < n:
            return None
        return np.stack(list(self._buf)[-n:])


class StreamingMemoryBuffer:
    """Fixed-capacity reservoir (Vitter's Algorithm R) with a full reset."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.slots: list[MemoryEntry] = []
        self.items_seen = 0
        self.reset_time: int | None = None

    def __len__(self) -> int:
        return len(self.slots)

    def offer(self, entry: MemoryEntry, rng: np.random.Generator) -> bool:
        """Offer one sample; returns whether it was stored."""
        self.items_seen += 1
        if len(self.slots) < self.capacity:
            self.slots.append(entry)
            return True
        j = int(rng.integers(self.items_seen))
        if j < self.capacity:
            self.slots[j] = entry
            return True
        return False

    def reset(self, t: int | None = None) -> None:
        self.slots = []
        self.items_seen = 0
        self.reset_time = t

    def sample(self, size: int, rng: np.random.Generator) -> list[MemoryEntry]:
        return em_sample(self, size, rng)


def em_sample(smb: StreamingMemoryBuffer, size: int, rng: np.random.Generator) -> list[MemoryEntry]:
    """Uniform draw without replacement of ``min(size, len(smb))`` entries."""
    k = min(size, len(smb.slots))
    if k <= 0:
        return []
    idx = rng.choice(len(smb.slots), size=k, replace=False)
    return [smb.slots[i] for i in idx]


def stack_entries(entries: list[MemoryEntry]) -> tuple[np.ndarray, np.ndarray]:
    """Batch entries into model layout: x ``[B, N, L, d]``, y ``[B, N, H, d]``."""
    xs = np.stack([e.x for e in entries]).transpose(0, 2, 1, 3)
    ys = np.stack([e.y for e in entries]).transpose(0, 2, 1, 3)
    return xs, ys


_SMB_MAGIC = "dost-smb v1"


def save_buffer(smb: StreamingMemoryBuffer, path) -> None:
    header = [
        _SMB_MAGIC,
        f"capacity={smb.capacity}",
        f"items_seen={smb.items_seen}",
        f"entries={len(smb.slots)}",
        f"reset_time={'' if smb.reset_time is None else smb.reset_time}",
        "origins=" + ",".join(str(e.origin_time) for e in smb.slots),
    ]
    arrays = []
    for i, e in enumerate(smb.slots):
        arrays.append((f"x{i}", e.x))
        arrays.append((f"y{i}", e.y))
    _write_packed(Path(path), header, arrays)


def load_buffer(path) -> StreamingMemoryBuffer:
    meta, tensors = _read_packed(Path(path), _SMB_MAGIC)
    smb = StreamingMemoryBuffer(int(meta["capacity"]))
    smb.items_seen = int(meta["items_seen"])
    smb.reset_time = int(meta["reset_time"]) if meta.get("reset_time") else None
    n = int(meta["entries"])
    origins = [int(s) for s in meta["origins"].split(",")] if n else []
    smb.slots = [MemoryEntry(tensors[f"x{i}"], tensors[f"y{i}"], origins[i]) for i in range(n)]
    return smb
