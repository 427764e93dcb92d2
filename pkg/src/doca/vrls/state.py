"""Scheduler-side observation: per-TB assignment counts and travelled distances."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..mobility import Direction, exit_time_ms
from ..scenario import ResourcePool
from ..simcore import PrrResult

N_COLUMNS = 4
REWARD_SCALE = 10.0


@dataclass
class _Assignment:
    tb: int
    speed: float
    entry_time: int
    expiry: int  # first ms at which the estimated travelled distance exceeds the DOCA


class Bookkeeping:
    """What the centralized scheduler remembers about its own past assignments.

    The scheduler gets no feedback from inside the DOCA, so an assignment is
    assumed gone once ``speed * (now - entry)`` exceeds the DOCA length.
    """

    def __init__(self, n_tbs: int, length: float, max_per_direction: int):
        self.n_tbs = n_tbs
        self.length = length
        self.max_per_direction = max_per_direction
        self.active: dict[Direction, list[_Assignment]] = {d: [] for d in Direction}
        self.last: dict[Direction, dict[int, _Assignment]] = {d: {} for d in Direction}

    def record(self, tb: int, direction: Direction, speed: float, entry_time: int) -> None:
        a = _Assignment(int(tb), float(speed), int(entry_time), exit_time_ms(entry_time, speed, self.length))
        d = Direction(direction)
        self.active[d].append(a)
        prev = self.last[d].get(a.tb)
        if prev is None or prev.entry_time <= a.entry_time:
            self.last[d][a.tb] = a

    def expire(self, now: int) -> None:
        for d in Direction:
            self.active[d] = [a for a in self.active[d] if a.expiry > now]

    def counts(self, direction: Direction, now: int) -> np.ndarray:
        self.expire(now)
        c = np.zeros(self.n_tbs, dtype=np.int64)
        for a in self.active[Direction(direction)]:
            c[a.tb] += 1
        return c

    def travelled(self, direction: Direction, now: int, counts: np.ndarray) -> np.ndarray:
        dx = np.zeros(self.n_tbs)
        for tb, a in self.last[Direction(direction)].items():
            if counts[tb] > 0:
                dx[tb] = a.speed * (now - a.entry_time) / 1000.0 / self.length
        return np.clip(dx, 0.0, 1.0)


def build_state(book: Bookkeeping, direction: Direction, now: int) -> np.ndarray:
    """``(n_tbs, 4)`` matrix: same-direction (count, distance) then opposite-direction (count, distance)."""
    direction = Direction(direction)
    cols = []
    for d in (direction, direction.opposite):
        c = book.counts(d, now)
        cols.append(c / book.max_per_direction)
        cols.append(book.travelled(d, now, c))
    return np.clip(np.stack(cols, axis=1), 0.0, 1.0)


def group_permutation(pool: ResourcePool, rng: np.random.Generator) -> np.ndarray:
    """Row order after shuffling subframe groups; subchannel order inside a group is kept."""
    n_sch = pool.n_subchannels
    order = rng.permutation(pool.n_subframes)
    return (order[:, None] * n_sch + np.arange(n_sch)[None, :]).reshape(-1)


def shuffle_state(state: np.ndarray, pool: ResourcePool, rng: np.random.Generator):
    """Returns ``(state[perm], perm)``; ``perm[i]`` is the TB shown in row ``i``."""
    perm = group_permutation(pool, rng)
    return state[perm], perm


def unshuffle_probs(probs: np.ndarray, perm: np.ndarray) -> np.ndarray:
    out = np.empty_like(probs)
    out[..., perm] = probs
    return out


def compute_reward(prr: PrrResult, previous: float) -> float:
    """``-10 * (1 - min PRR)``; an interval without receptions repeats ``previous``."""
    if prr.empty:
        return previous
    return REWARD_SCALE * (prr.min - 1.0)
