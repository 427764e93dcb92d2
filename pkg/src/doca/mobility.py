"""Vehicle kinematics on the two-direction DOCA road, exits and re-insertion.

Time is integer milliseconds. A vehicle's position is a pure function of its
entry time and constant speed, so advancing by many 1 ms steps and jumping
straight to a later instant give the same answer.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable

import numpy as np

from .scenario import ScenarioConfig


class Direction(IntEnum):
    FORWARD = 0
    BACKWARD = 1

    @property
    def opposite(self) -> "Direction":
        return Direction(1 - self)


def exit_time_ms(entry_time: int, speed: float, length: float) -> int:
    """First integer ms at which the travelled distance exceeds ``length``."""
    k = int(math.floor(length * 1000.0 / speed))
    while speed * k / 1000.0 > length:
        k -= 1
    while speed * k / 1000.0 <= length:
        k += 1
    return entry_time + k


@dataclass
class Vehicle:
    id: int
    direction: Direction
    speed: float
    entry_time: int
    exit_time: int
    assigned_tb: int | None = None
    cam_phase: int = 0
    position: float = 0.0

    def position_at(self, t: int) -> float:
        return self.speed * (t - self.entry_time) / 1000.0


def road_coordinates(direction, position, length: float, lane_width: float):
    """Map (direction, distance from own entry point) to road (x, y).

    Works elementwise on arrays. Forward traffic drives +x in lane y=0,
    backward traffic drives -x in the lane offset by ``lane_width``.
    """
    direction = np.asarray(direction)
    position = np.asarray(position, dtype=float)
    x = np.where(direction == Direction.FORWARD, position, length - position)
    y = np.where(direction == Direction.FORWARD, 0.0, lane_width)
    return x, y


def advance(vehicles: Iterable[Vehicle], now: int, dt: int = 1, length: float = math.inf) -> list[Vehicle]:
    """Move every vehicle to ``now + dt``; returns the ones now past ``length``."""
    exited = []
    for v in vehicles:
        v.position = v.position_at(now + dt)
        if v.position > length:
            exited.append(v)
    return exited


@dataclass
class ArrivalProcess:
    """Per-direction Poisson arrival stream with a per-direction vehicle cap.

    An arrival drawn while its direction is full stays pending and is released
    at the first instant a slot frees (see :meth:`release`).
    """

    headway_mean_s: float
    cap: int
    next_time: dict = field(default_factory=lambda: {Direction.FORWARD: None, Direction.BACKWARD: None})

    def _draw_gap(self, rng: np.random.Generator) -> int:
        # ceil keeps inter-arrival times strictly positive on the ms grid
        return max(1, int(math.ceil(rng.exponential(self.headway_mean_s) * 1000.0)))

    def start(self, now: int, rng: np.random.Generator) -> None:
        for d in Direction:
            self.next_time[d] = now + self._draw_gap(rng)

    def release(self, direction: Direction, now: int) -> None:
        if self.next_time[direction] is not None and self.next_time[direction] < now:
            self.next_time[direction] = now


def next_arrival(process: ArrivalProcess, rng: np.random.Generator,
                 occupancy: dict) -> tuple[int, Direction] | None:
    """Pop the earliest arrival among directions below their cap.

    Returns ``None`` when every direction is at its cap; the suppressed
    arrivals keep their times until :meth:`ArrivalProcess.release`.
    """
    if any(t is None for t in process.next_time.values()):
        process.start(0, rng)
    open_dirs = [d for d in Direction if occupancy.get(d, 0) < process.cap]
    if not open_dirs:
        return None
    d = min(open_dirs, key=lambda d: (process.next_time[d], d))
    t = process.next_time[d]
    process.next_time[d] = t + process._draw_gap(rng)
    return t, d


def reinsert_delay_ms(policy: str, mean_offset_s: float, rng: np.random.Generator) -> int:
    """Delay between an exit and the re-entry in the opposite direction."""
    if policy == "CONSTANT_DENSITY":
        return 0
    if policy == "EXP_REINSERT":
        return int(round(rng.exponential(mean_offset_s) * 1000.0)) if mean_offset_s > 0 else 0
    raise ValueError(f"unknown re-insertion policy {policy!r}")


_EXIT, _ENTRY = 0, 1


class Traffic:
    """Population of a DOCA: initial drop, exits and re-insertions.

    Vehicle ids are ``0..n-1`` and persist across traversals; a re-inserted
    vehicle keeps its id but starts a new traversal without a TB.
    """

    def __init__(self, config: ScenarioConfig, rng: np.random.Generator):
        self.config = config
        self.rng = rng
        self.length = config.geometry.length
        self.lane_width = config.geometry.lane_width
        self.cap = config.max_vehicles_per_direction
        self.vehicles: dict[int, Vehicle] = {}
        self._heap: list[tuple[int, int, int, int]] = []
        self._pending_dir: dict[int, Direction] = {}

    @property
    def n_total(self) -> int:
        return self.config.mobility.n

    def count(self, direction: Direction) -> int:
        return sum(1 for v in self.vehicles.values() if v.direction == direction)

    def _new_vehicle(self, vid: int, direction: Direction, entry_time: int) -> Vehicle:
        speed = self.config.speed_mps
        return Vehicle(id=vid, direction=direction, speed=speed, entry_time=entry_time,
                       exit_time=exit_time_ms(entry_time, speed, self.length))

    def populate(self, now: int = 0) -> list[Vehicle]:
        """Initial drop: n vehicles, directions alternating, positions uniform on the road."""
        speed = self.config.speed_mps
        out = []
        for vid in range(self.n_total):
            direction = Direction(vid % 2)
            pos = float(self.rng.uniform(0.0, self.length))
            entry = now - int(round(pos / speed * 1000.0))
            v = self._new_vehicle(vid, direction, entry)
            v.position = v.position_at(now)
            self.vehicles[vid] = v
            heapq.heappush(self._heap, (v.exit_time, _EXIT, vid, 0))
            out.append(v)
        return out

    def next_event_time(self) -> int | None:
        return self._heap[0][0] if self._heap else None

    def pop_events(self, t: int) -> tuple[list[Vehicle], list[Vehicle]]:
        """Process every exit then every entry due at ``t``.

        Returns ``(exited, entered)``. Zero-delay re-entries of vehicles that
        exit at ``t`` are part of ``entered``.
        """
        exited, entered = [], []
        while self._heap and self._heap[0][0] == t:
            _, kind, vid, _ = heapq.heappop(self._heap)
            if kind == _EXIT:
                v = self.vehicles.pop(vid)
                v.position = v.position_at(t)
                exited.append(v)
                delay = reinsert_delay_ms(self.config.mobility.policy, self.config.mobility.mean_offset_s, self.rng)
                self._pending_dir[vid] = v.direction.opposite
                heapq.heappush(self._heap, (t + delay, _ENTRY, vid, 0))
            else:
                direction = self._pending_dir[vid]
                if self.count(direction) >= self.cap:
                    # direction full: retry when its next vehicle leaves
                    nxt = min((w.exit_time for w in self.vehicles.values() if w.direction == direction),
                              default=t + 1)
                    heapq.heappush(self._heap, (max(nxt, t + 1), _ENTRY, vid, 0))
                    continue
                del self._pending_dir[vid]
                v = self._new_vehicle(vid, direction, t)
                self.vehicles[vid] = v
                heapq.heappush(self._heap, (v.exit_time, _EXIT, vid, 0))
                entered.append(v)
        return exited, entered

    def coordinates(self, ids: np.ndarray, t) -> tuple[np.ndarray, np.ndarray]:
        """Road (x, y) of vehicles ``ids`` at time(s) ``t`` (scalar or broadcastable array)."""
        vs = [self.vehicles[i] for i in ids]
        entry = np.array([v.entry_time for v in vs], dtype=float)
        speed = np.array([v.speed for v in vs])
        direction = np.array([int(v.direction) for v in vs])
        pos = speed * (np.asarray(t, dtype=float) - entry) / 1000.0
        return road_coordinates(direction, pos, self.length, self.lane_width)
