"""Baseline schedulers and the single-collision-domain analytic oracle.

Every scheduler implements ``on_vehicle_entered(decision) -> tb``. Optional
hooks: ``on_initial_assignment(vehicle, tb)`` for the random start-up
assignment and ``on_transmissions(sim, ...)`` for schedulers that listen to
the channel (Mode-4).
"""
from __future__ import annotations

import math
from collections import Counter
from typing import Mapping, Sequence

import numpy as np

from .scenario import ResourcePool, ScenarioConfig
from .simcore import Decision

SCHEDULER_NAMES = ("random", "mode4", "oracle", "vrls")


def random_assign(n_tbs: int, rng: np.random.Generator) -> int:
    return int(rng.integers(n_tbs))


class RandomScheduler:
    """Centralized scheduler that picks a uniformly random TB for every entrant."""

    name = "random"

    def __init__(self, pool: ResourcePool, rng: np.random.Generator):
        self.pool = pool
        self.rng = rng

    def on_vehicle_entered(self, decision: Decision) -> int:
        return random_assign(self.pool.n_tbs, self.rng)


# --- Mode-4 ----------------------------------------------------------------

def mode4_select(energy: np.ndarray | None, rng: np.random.Generator,
                 candidate_fraction: float = 0.2, n_tbs: int | None = None) -> int:
    """Sensing-based selection: uniform pick among the lowest-energy fraction of TBs.

    ``energy`` is the per-TB energy sensed over the window, or None when the
    vehicle has no sensing history (every TB is then a candidate). Ties in
    the ranking are broken at random.
    """
    if energy is None:
        return int(rng.integers(n_tbs))
    n = len(energy)
    n_cand = max(1, int(math.ceil(candidate_fraction * n)))
    order = np.lexsort((rng.random(n), energy))
    return int(order[rng.integers(n_cand)])


class Mode4Scheduler:
    """Simplified distributed sensing-based selection (LTE-V2X Mode-4 style).

    Each vehicle senses the per-TB energy of transmissions it can hear over
    the last ``window_ms``; a reselection picks uniformly among the lowest
    ``candidate_fraction`` of TBs. The counter is drawn from ``counter_range``
    and decremented on each own transmission; at zero the vehicle keeps its
    TB with probability ``keep_prob`` and reselects otherwise. Vehicles select
    afresh at DOCA entry with an empty sensing history.
    """

    name = "mode4"

    def __init__(self, config: ScenarioConfig, rng: np.random.Generator, *, window_ms: int = 1000,
                 candidate_fraction: float = 0.2, counter_range: tuple[int, int] = (5, 15),
                 keep_prob: float = 0.0):
        self.config = config
        self.pool = config.pool
        self.rng = rng
        self.period = config.cam_period_ms
        self.n_slots = max(1, int(math.ceil(window_ms / self.period)))
        self.candidate_fraction = candidate_fraction
        self.counter_range = counter_range
        self.keep_prob = keep_prob
        n = config.mobility.n
        self.energy = np.zeros((n, self.n_slots, self.pool.n_tbs))
        self.slot_frame = np.full(self.n_slots, -1, dtype=np.int64)
        self.has_history = np.zeros(n, dtype=bool)
        self.counter = np.zeros(n, dtype=np.int64)
        self.reselections = 0

    def _new_counter(self) -> int:
        lo, hi = self.counter_range
        return int(self.rng.integers(lo, hi + 1))

    def _fresh(self, vid: int) -> int:
        self.energy[vid] = 0.0
        self.has_history[vid] = False
        self.counter[vid] = self._new_counter()
        return mode4_select(None, self.rng, self.candidate_fraction, self.pool.n_tbs)

    def on_initial_assignment(self, vehicle, tb: int) -> None:
        self.energy[vehicle.id] = 0.0
        self.has_history[vehicle.id] = False
        self.counter[vehicle.id] = self._new_counter()

    def on_vehicle_entered(self, decision: Decision) -> int:
        return self._fresh(decision.vehicle_id)

    def sensed(self, vid: int) -> np.ndarray | None:
        if not self.has_history[vid]:
            return None
        return self.energy[vid].sum(axis=0)

    def on_transmissions(self, sim, tx_ids, tx_tbs, tx_times, rx_ids, distances) -> dict[int, int]:
        frame = int(tx_times[0]) // self.period
        slot = frame % self.n_slots
        if self.slot_frame[slot] != frame:
            self.energy[:, slot, :] = 0.0
            self.slot_frame[slot] = frame
        e = sim.channel.sensed_energy(distances)
        e[tx_ids[:, None] == rx_ids[None, :]] = 0.0
        for j, tb in enumerate(tx_tbs.tolist()):
            self.energy[rx_ids, slot, tb] += e[j]
        self.has_history[rx_ids] = True
        changes = {}
        for vid in tx_ids.tolist():
            self.counter[vid] -= 1
            if self.counter[vid] <= 0:
                self.counter[vid] = self._new_counter()
                if self.rng.random() >= self.keep_prob:
                    changes[vid] = mode4_select(self.sensed(vid), self.rng, self.candidate_fraction)
                    self.reselections += 1
        return changes


# --- analytic SCD oracle -------------------------------------------------

def analytic_prr(assignment: Sequence[int], pool: ResourcePool) -> float | None:
    """PRR of one frame in a single collision domain when every vehicle transmits once.

    A message reaches every other vehicle unless its TB is shared (then nobody
    decodes it) or the receiver transmits in the same subframe.
    None when there is at most one vehicle (no receivers).
    """
    n = len(assignment)
    if n < 2:
        return None
    tb_count = Counter(assignment)
    sf_count = Counter(pool.subframe_of(tb) for tb in assignment)
    succ = sum(n - sf_count[pool.subframe_of(tb)] for tb in assignment if tb_count[tb] == 1)
    return succ / (n * (n - 1))


class OracleCapacityError(ValueError):
    pass


def brute_force_assign(fixed: Mapping[int, int], new: Sequence[int], pool: ResourcePool,
                       cap: int = 10) -> dict[int, int]:
    """TBs for the ``new`` vehicles maximizing the analytic SCD PRR, others kept as ``fixed``.

    Depth-first search over TB choices with two reductions: TBs whose
    (TB load, subframe load profile) signature matches a lower-index TB are
    skipped, and configurations equal up to relabelling are expanded once.
    Among optimal assignments the lexicographically smallest TB vector wins.
    """
    if len(fixed) + len(new) > cap:
        raise OracleCapacityError(f"population {len(fixed) + len(new)} exceeds oracle cap {cap}")
    n_sch = pool.n_subchannels
    tb_load = [0] * pool.n_tbs
    for tb in fixed.values():
        tb_load[tb] += 1
    base = list(fixed.values())
    best: list = [-1.0, None]
    seen: set = set()

    def canonical() -> tuple:
        groups = []
        for sf in range(pool.n_subframes):
            loads = tuple(sorted(tb_load[sf * n_sch:(sf + 1) * n_sch]))
            groups.append(loads)
        return tuple(sorted(groups))

    def dfs(i: int, chosen: list[int]) -> None:
        if i == len(new):
            value = analytic_prr(base + chosen, pool)
            value = 1.0 if value is None else value
            if value > best[0] + 1e-15:
                best[0], best[1] = value, list(chosen)
            return
        key = (i, canonical())
        if key in seen:
            return
        seen.add(key)
        signatures = set()
        for tb in range(pool.n_tbs):
            sf = tb // n_sch
            sig = (tb_load[tb], tuple(sorted(tb_load[sf * n_sch:(sf + 1) * n_sch])))
            if sig in signatures:
                continue
            signatures.add(sig)
            tb_load[tb] += 1
            chosen.append(tb)
            dfs(i + 1, chosen)
            chosen.pop()
            tb_load[tb] -= 1

    dfs(0, [])
    return dict(zip(new, best[1]))


class OracleScheduler:
    """Upper-bound scheduler for SCD: best TB for each entrant given the true occupancy."""

    name = "oracle"

    def __init__(self, config: ScenarioConfig, cap: int = 10):
        if config.channel.variant != "SCD":
            raise ValueError("the analytic oracle only applies to single-collision-domain scenarios")
        self.pool = config.pool
        self.cap = cap

    def on_vehicle_entered(self, decision: Decision) -> int:
        fixed = {vid: tb for vid, (tb, _) in decision.snapshot.items() if tb is not None}
        return brute_force_assign(fixed, [decision.vehicle_id], self.pool, self.cap)[decision.vehicle_id]


def attach(sim, scheduler) -> None:
    """Wire a scheduler's optional hooks into a freshly built simulation."""
    on_tx = getattr(scheduler, "on_transmissions", None)
    if on_tx is not None:
        sim.transmission_hook = on_tx
    on_init = getattr(scheduler, "on_initial_assignment", None)
    if on_init is not None:
        for v in sim.initial_vehicles:
            on_init(v, v.assigned_tb)
