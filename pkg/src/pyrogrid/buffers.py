"""Bounded FIFO replay memories.

``TrajectoryBuffer`` keeps one agent's recent (observation, hidden state,
fire map) entries in preallocated ring arrays so that windows of
consecutive weeks can be gathered with a single fancy index.
``TransitionBuffer`` keeps the exchange layer's RL transitions.
Sampled batches are always copies, never views of the storage.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import InsufficientData, ShapeError

TRAJECTORY_CAPACITY = 512
TRANSITION_CAPACITY = 2048


@dataclass
class TrajectoryBatch:
    obs: np.ndarray       # (M, T_w, C, H, W)
    h0: np.ndarray        # (M, d_h): stored state before each window's first frame
    targets: np.ndarray   # (M, T_w, L, H, W): fire at offsets 1..L past every window position
    weeks: np.ndarray     # (M, T_w) dataset week of every frame
    starts: np.ndarray    # (M,) logical start index inside the buffer


class TrajectoryBuffer:
    """Ring buffer of ``(x_t, h_t, f_t)`` with dataset week and a global sequence number.

    ``seq`` must strictly increase across pushes; ``week`` indexes the
    dataset and resets when a new pass over the data begins.  A window is
    valid only if both run consecutively, so windows never straddle a
    restart (and therefore never reach past the end of the split).
    """

    def __init__(self, capacity: int = TRAJECTORY_CAPACITY):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._obs = self._h = self._fire = None
        self._week = np.zeros(capacity, dtype=np.int64)
        self._seq = np.zeros(capacity, dtype=np.int64)
        self._head = 0  # physical index of the oldest entry
        self._len = 0

    def __len__(self) -> int:
        return self._len

    def _alloc(self, x, h, f):
        self._obs = np.zeros((self.capacity,) + x.shape)
        self._h = np.zeros((self.capacity,) + h.shape)
        self._fire = np.zeros((self.capacity,) + f.shape, dtype=np.uint8)

    def push(self, x, h, fire, week: int, seq: int) -> None:
        x, h, fire = np.asarray(x, dtype=np.float64), np.asarray(h, dtype=np.float64), np.asarray(fire)
        if self._obs is None:
            self._alloc(x, h, fire)
        if x.shape != self._obs.shape[1:] or h.shape != self._h.shape[1:] or fire.shape != self._fire.shape[1:]:
            raise ShapeError(f"entry shapes {x.shape}, {h.shape}, {fire.shape} do not match the buffer")
        if self._len and seq <= self._seq[(self._head + self._len - 1) % self.capacity]:
            raise ValueError("sequence numbers must strictly increase")
        if self._len == self.capacity:
            slot = self._head
            self._head = (self._head + 1) % self.capacity
        else:
            slot = (self._head + self._len) % self.capacity
            self._len += 1
        self._obs[slot], self._h[slot], self._fire[slot] = x, h, fire
        self._week[slot], self._seq[slot] = week, seq

    def _phys(self, logical) -> np.ndarray:
        return (self._head + np.asarray(logical)) % self.capacity

    def entry(self, i: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, int, int]:
        """Copy of the i-th oldest entry."""
        if not 0 <= i < self._len:
            raise IndexError(i)
        p = int(self._phys(i))
        return (self._obs[p].copy(), self._h[p].copy(), self._fire[p].copy(),
                int(self._week[p]), int(self._seq[p]))

    def valid_starts(self, span: int) -> np.ndarray:
        """Logical start indices of every run of ``span`` consecutive weeks."""
        n = self._len - span + 1
        if n <= 0:
            return np.zeros(0, dtype=np.int64)
        idx = np.arange(self._len)
        week, seq = self._week[self._phys(idx)], self._seq[self._phys(idx)]
        ok = (week[span - 1:] - week[:n] == span - 1) & (seq[span - 1:] - seq[:n] == span - 1)
        return np.flatnonzero(ok)

    def sample_trajectory(self, window: int, batch: int, horizon_max: int, rng: np.random.Generator) -> TrajectoryBatch:
        """``batch`` windows of ``window`` frames, start indices uniform over valid runs."""
        if window < 1 or batch < 0:
            raise ValueError("window must be >= 1 and batch >= 0")
        starts = self.valid_starts(window + horizon_max)
        if len(starts) == 0:
            raise InsufficientData(f"no run of {window + horizon_max} consecutive weeks among {self._len} entries")
        chosen = starts[rng.integers(0, len(starts), size=batch)]
        frame_idx = self._phys(chosen[:, None] + np.arange(window)[None, :])               # (M, T_w)
        offsets = np.arange(window)[:, None] + np.arange(1, horizon_max + 1)[None, :]        # (T_w, L)
        target_idx = self._phys(chosen[:, None, None] + offsets[None])                       # (M, T_w, L)
        return TrajectoryBatch(
            obs=self._obs[frame_idx],
            h0=self._h[frame_idx[:, 0]],
            targets=self._fire[target_idx].astype(np.float64),
            weeks=self._week[frame_idx],
            starts=chosen,
        )


@dataclass
class Transition:
    hbar: np.ndarray
    action: np.ndarray
    reward: float
    hbar_next: np.ndarray


def check_action_matrix(a: np.ndarray, self_weight: float, tol: float = 1e-9) -> None:
    """Raise ``ValueError`` unless ``a`` is column-stochastic with the pinned diagonal."""
    a = np.asarray(a)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ShapeError(f"action matrix must be square, got {a.shape}")
    if np.any(a < 0) or np.any(np.abs(a.sum(axis=0) - 1.0) > tol):
        raise ValueError("action matrix columns must be probability distributions")
    if n > 1 and np.any(np.diag(a) != self_weight):
        raise ValueError(f"action matrix diagonal must equal {self_weight}")


class TransitionBuffer:
    """FIFO of :class:`Transition` with uniform sampling without replacement."""

    def __init__(self, capacity: int = TRANSITION_CAPACITY, self_weight: float | None = None):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.self_weight = self_weight
        self._items: deque[Any] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def push(self, item) -> None:
        if isinstance(item, Transition):
            if self.self_weight is not None:
                check_action_matrix(item.action, self.self_weight)
            if self._items and item.hbar.shape != self._items[0].hbar.shape:
                raise ShapeError(f"state shape {item.hbar.shape} differs from {self._items[0].hbar.shape}")
        self._items.append(item)

    def sample_transitions(self, batch: int, rng: np.random.Generator) -> list:
        if batch < 0 or batch > len(self._items):
            raise InsufficientData(f"cannot draw {batch} distinct transitions from {len(self._items)}")
        idx = rng.choice(len(self._items), size=batch, replace=False)
        return [_copy(self._items[i]) for i in idx]


def _copy(item):
    if isinstance(item, Transition):
        return Transition(item.hbar.copy(), item.action.copy(), float(item.reward), item.hbar_next.copy())
    return item


def stack_transitions(batch: list[Transition]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(hbar, action, reward, hbar_next) arrays with a leading batch axis."""
    return (np.stack([t.hbar for t in batch]), np.stack([t.action for t in batch]),
            np.array([t.reward for t in batch]), np.stack([t.hbar_next for t in batch]))
