"""Millisecond-resolution DOCA engine.

Timing model: CAM frames are ``cam_period_ms`` long and start at multiples of
the period. A vehicle generates its CAM for frame ``k`` at ``k*P + cam_phase``
(``cam_phase`` uniform over the pool's subframes) and sends it on its TB in the
first pool occurrence that starts after the generation span, i.e. at
``occurrence_start(k) + subframe(tb)``. Pool occurrences are back to back, so
with a 10-subframe pool and 100 ms period every tenth occurrence carries CAMs
and vehicles sharing a subframe always transmit simultaneously.

Within one millisecond, mobility (exits, then entries and the scheduler calls
they trigger) is processed before transmissions.
"""
from __future__ import annotations

import gzip
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Protocol

import numpy as np

from .channel import NOT_A_RECEIVER, Channel, Result, TransmissionOutcome, resolve_subframe
from .mobility import Direction, Traffic, Vehicle
from .scenario import ScenarioConfig

__all__ = [
    "Decision", "PrrCounter", "PrrResult", "PrrAccumulator", "WindowSnapshot", "Simulation",
    "TransmissionOutcome", "TraceWriter", "compute_prr", "read_trace", "recount_trace",
    "resolve_subframe", "occurrence_start", "first_frame",
]

N_RESULTS = len(Result)


@dataclass(frozen=True)
class PrrResult:
    per_bin: tuple[float | None, ...]
    min: float | None

    @property
    def empty(self) -> bool:
        return self.min is None


class PrrCounter:
    """Integer success / in-range sums per range bin, plus result counts of in-bin receivers."""

    def __init__(self, n_bins: int):
        self.successes = np.zeros(n_bins, dtype=np.int64)
        self.in_range = np.zeros(n_bins, dtype=np.int64)
        self.results = np.zeros(N_RESULTS, dtype=np.int64)
        self.n_transmissions = 0

    def add(self, successes, in_range, results, n_transmissions: int) -> None:
        self.successes += successes
        self.in_range += in_range
        self.results += results
        self.n_transmissions += n_transmissions

    def reset(self) -> None:
        self.successes[:] = 0
        self.in_range[:] = 0
        self.results[:] = 0
        self.n_transmissions = 0

    def prr(self) -> PrrResult:
        return compute_prr(self)


def compute_prr(counter: PrrCounter) -> PrrResult:
    """Per-bin ratio of successful receivers to in-range receivers; empty bins give None.

    ``min`` is taken over non-empty bins and is None when all bins are empty.
    """
    per_bin = tuple(None if n == 0 else float(s) / float(n)
                    for s, n in zip(counter.successes, counter.in_range))
    present = [p for p in per_bin if p is not None]
    return PrrResult(per_bin, min(present) if present else None)


def tally(results: np.ndarray, distances: np.ndarray, bins: np.ndarray):
    """Per-bin (successes, in_range) and in-bin result counts for a result matrix."""
    receiver = results != NOT_A_RECEIVER
    succ = np.empty(len(bins), dtype=np.int64)
    inr = np.empty(len(bins), dtype=np.int64)
    any_bin = np.zeros(results.shape, dtype=bool)
    for i, (lo, hi) in enumerate(bins):
        m = receiver & (distances >= lo) & (distances < hi)
        any_bin |= m
        inr[i] = np.count_nonzero(m)
        succ[i] = np.count_nonzero(m & (results == Result.SUCCESS))
    counts = np.bincount(results[any_bin].astype(np.int64), minlength=N_RESULTS)
    return succ, inr, counts


@dataclass(frozen=True)
class WindowSnapshot:
    index: int
    start_ms: int
    end_ms: int
    partial: bool
    successes: tuple[int, ...]
    in_range: tuple[int, ...]
    prr: PrrResult
    results: tuple[int, ...]
    n_transmissions: int
    n_mobility_events: int
    n_decisions: int

    @property
    def collisions(self) -> int:
        return self.results[Result.COLLISION_LOSS]

    @property
    def hd_losses(self) -> int:
        return self.results[Result.HD_LOSS]

    @property
    def stationary(self) -> bool:
        return self.n_mobility_events == 0 and not self.partial


class PrrAccumulator:
    """Fixed-length reporting windows ``[i*W, (i+1)*W)`` fed in time order."""

    def __init__(self, bins: Iterable[tuple[float, float]], window_ms: int):
        self.bins = np.array(list(bins), dtype=float)
        self.window_ms = window_ms
        self.windows: list[WindowSnapshot] = []
        self._index = 0
        self._counter = PrrCounter(len(self.bins))
        self._mobility = 0
        self._decisions = 0

    def _close(self, end_ms: int, partial: bool) -> None:
        c = self._counter
        self.windows.append(WindowSnapshot(
            index=self._index, start_ms=self._index * self.window_ms, end_ms=end_ms, partial=partial,
            successes=tuple(int(x) for x in c.successes), in_range=tuple(int(x) for x in c.in_range),
            prr=c.prr(), results=tuple(int(x) for x in c.results), n_transmissions=c.n_transmissions,
            n_mobility_events=self._mobility, n_decisions=self._decisions))
        self._index += 1
        c.reset()
        self._mobility = 0
        self._decisions = 0

    def advance_to(self, t: int) -> None:
        """Close every window that ends at or before ``t``."""
        while (self._index + 1) * self.window_ms <= t:
            self._close((self._index + 1) * self.window_ms, partial=False)

    def add(self, t: int, successes, in_range, results, n_transmissions: int) -> None:
        self.advance_to(t)
        self._counter.add(successes, in_range, results, n_transmissions)

    def note_mobility(self, t: int, n: int = 1) -> None:
        self.advance_to(t)
        self._mobility += n

    def note_decision(self, t: int) -> None:
        self.advance_to(t)
        self._decisions += 1

    def flush(self, end_ms: int) -> None:
        """Close all windows up to ``end_ms``; a partly elapsed last window is marked partial."""
        self.advance_to(end_ms)
        if end_ms > self._index * self.window_ms:
            self._close(end_ms, partial=True)


class TraceWriter:
    """Line-delimited per-receiver records: ``time,tx,tb,receiver,distance,result``.

    Distances are written with ``repr`` so a recount bins exactly as the engine did.
    Paths ending in ``.gz`` are gzip-compressed.
    """

    HEADER = "time,tx,tb,receiver,distance,result\n"

    def __init__(self, path):
        self.path = str(path)
        opener = gzip.open if self.path.endswith(".gz") else open
        self._fh = opener(self.path, "wt", encoding="ascii", newline="\n")
        self._fh.write(self.HEADER)

    def write(self, tx_ids, tx_tbs, tx_times, rx_ids, distances, results) -> None:
        rx = rx_ids.tolist()
        lines = []
        for j in range(len(tx_ids)):
            head = f"{int(tx_times[j])},{int(tx_ids[j])},{int(tx_tbs[j])},"
            row_d = distances[j].tolist()
            row_r = results[j].tolist()
            lines.extend(f"{head}{r},{d!r},{Result(c).name}\n"
                         for r, d, c in zip(rx, row_d, row_r) if c != NOT_A_RECEIVER)
        self._fh.write("".join(lines))

    def close(self) -> None:
        self._fh.close()


def read_trace(path) -> Iterable[tuple[int, int, int, int, float, str]]:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rt", encoding="ascii") as fh:
        next(fh)
        for line in fh:
            t, tx, tb, rx, d, res = line.rstrip("\n").split(",")
            yield int(t), int(tx), int(tb), int(rx), float(d), res


def recount_trace(path, bins, window_ms: int) -> dict[int, tuple[list[int], list[int]]]:
    """Brute-force per-window ``(successes, in_range)`` lists recomputed from a trace file."""
    out: dict[int, tuple[list[int], list[int]]] = {}
    for t, _tx, _tb, _rx, d, res in read_trace(path):
        w = t // window_ms
        succ, inr = out.setdefault(w, ([0] * len(bins), [0] * len(bins)))
        for i, (lo, hi) in enumerate(bins):
            if lo <= d < hi:
                inr[i] += 1
                if res == "SUCCESS":
                    succ[i] += 1
    return out


@dataclass(frozen=True)
class Decision:
    """A vehicle entering the DOCA that needs a TB.

    ``reward_prr`` covers transmissions since the previous decision. ``snapshot``
    maps every other present vehicle id to ``(tb, direction)``; only oracle
    schedulers should look at it.
    """

    vehicle_id: int
    direction: Direction
    speed: float
    time: int
    reward_prr: PrrResult
    snapshot: dict[int, tuple[int | None, Direction]] = field(repr=False)


class Scheduler(Protocol):
    name: str

    def on_vehicle_entered(self, decision: Decision) -> int: ...


def occurrence_start(frame: int, period: int, n_subframes: int) -> int:
    """Start of the pool occurrence carrying frame ``frame``'s CAMs."""
    return -((-(frame * period + n_subframes)) // n_subframes) * n_subframes


def first_frame(entry_time: int, cam_phase: int, period: int) -> int:
    """First frame whose generation instant is not before the entry time."""
    return -((-(entry_time - cam_phase)) // period)


class _Pause:
    pass


_PAUSE = _Pause()


class Simulation:
    """One independent DOCA instance.

    Drive it pull-style with :meth:`advance` / :meth:`assign`, or hand it a
    scheduler via :meth:`run` / :meth:`step`.
    """

    def __init__(self, config: ScenarioConfig, seed: int | None = None, *,
                 trace: TraceWriter | None = None,
                 transmission_hook: Callable[..., dict[int, int] | None] | None = None,
                 initial_tb: Callable[[Vehicle], int] | None = None):
        self.config = config
        self.pool = config.pool
        self.period = config.cam_period_ms
        self.n_sf = config.pool.n_subframes
        self.n_sch = config.pool.n_subchannels
        self.seed = config.seed if seed is None else seed
        ss = np.random.SeedSequence(self.seed)
        rng_mob, rng_phase, rng_ch, rng_init = (np.random.default_rng(s) for s in ss.spawn(4))
        self._rng_phase = rng_phase
        self.traffic = Traffic(config, rng_mob)
        self.channel = Channel(config.channel, config.mobility.n, rng_ch)
        self.bins = np.array(config.prr_range_bins, dtype=float)
        self.windows = PrrAccumulator(config.prr_range_bins, config.prr_window_ms)
        self.reward_counter = PrrCounter(len(self.bins))
        self.trace = trace
        self.transmission_hook = transmission_hook
        self.now = 0
        self.n_decisions = 0
        self.n_transmissions = 0
        self._next_frame: dict[int, int] = {}
        self._present: tuple | None = None
        self._awaiting: Decision | None = None
        self._until = 0
        self._scheduler: Scheduler | None = None
        self._outcome_sink: list | None = None
        self._memo: dict | None = {} if self._memo_ok() else None
        # initial population, each on a uniformly random TB
        self.initial_vehicles: list[Vehicle] = []
        for v in self.traffic.populate(0):
            tb = int(rng_init.integers(self.pool.n_tbs)) if initial_tb is None else int(initial_tb(v))
            self._start_cam(v, tb)
            self.initial_vehicles.append(v)
        self._gen = self._loop()

    # --- bookkeeping -------------------------------------------------
    def _memo_ok(self) -> bool:
        """Outcome sums can be reused across identical frames: SCD with one bin covering the road."""
        if self.config.channel.variant != "SCD" or len(self.config.prr_range_bins) != 1:
            return False
        lo, hi = self.config.prr_range_bins[0]
        geo = self.config.geometry
        return lo == 0.0 and hi > math.hypot(geo.length, geo.lane_width)

    def _start_cam(self, v: Vehicle, tb: int) -> None:
        """Schedule CAMs for a vehicle that just received its TB."""
        v.assigned_tb = tb
        v.cam_phase = int(self._rng_phase.integers(self.n_sf))
        # the initial population entered before t=0 but only starts sending now
        self._next_frame[v.id] = first_frame(max(v.entry_time, self.now), v.cam_phase, self.period)
        self._present = None

    def tx_time(self, vid: int) -> int:
        v = self.traffic.vehicles[vid]
        return occurrence_start(self._next_frame[vid], self.period, self.n_sf) + v.assigned_tb // self.n_sch

    def snapshot(self, exclude: int | None = None) -> dict[int, tuple[int | None, Direction]]:
        return {vid: (v.assigned_tb, v.direction) for vid, v in sorted(self.traffic.vehicles.items())
                if vid != exclude}

    def reassign(self, vid: int, tb: int) -> None:
        """Change a present vehicle's TB from its next frame on (distributed schedulers)."""
        if not 0 <= tb < self.pool.n_tbs:
            raise ValueError(f"TB {tb} outside pool of {self.pool.n_tbs}")
        self.traffic.vehicles[vid].assigned_tb = int(tb)
        self._present = None

    def _present_arrays(self):
        if self._present is None:
            vs = sorted(self.traffic.vehicles.values(), key=lambda v: v.id)
            self._present = (
                np.array([v.id for v in vs], dtype=np.int64),
                np.array([v.entry_time for v in vs], dtype=float),
                np.array([v.speed for v in vs], dtype=float),
                np.array([int(v.direction) for v in vs], dtype=np.int64),
            )
        return self._present

    def distances(self, tx_cols: np.ndarray, tx_times: np.ndarray) -> np.ndarray:
        """Distances from each transmitter (column index into present ids) to every present vehicle."""
        ids, entry, speed, direction = self._present_arrays()
        geo = self.config.geometry
        pos = speed[None, :] * (tx_times[:, None].astype(float) - entry[None, :]) / 1000.0
        x = np.where(direction[None, :] == Direction.FORWARD, pos, geo.length - pos)
        y = np.where(direction == Direction.FORWARD, 0.0, geo.lane_width)
        rows = np.arange(len(tx_cols))
        dx = x - x[rows, tx_cols][:, None]
        dy = y[None, :] - y[tx_cols][:, None]
        return np.hypot(dx, dy)

    # --- public driving API --------------------------------------------
    def advance(self, until: int) -> Decision | None:
        """Run until a vehicle needs a TB (returned) or every event before ``until`` is done (None)."""
        if self._awaiting is not None:
            raise RuntimeError("assign() the pending decision before advancing")
        self._until = until
        msg = next(self._gen)
        if msg is _PAUSE:
            return None
        self._awaiting = msg
        return msg

    def assign(self, tb: int) -> None:
        d = self._awaiting
        if d is None:
            raise RuntimeError("no pending decision")
        if not 0 <= int(tb) < self.pool.n_tbs:
            raise ValueError(f"TB {tb} outside pool of {self.pool.n_tbs}")
        self._start_cam(self.traffic.vehicles[d.vehicle_id], int(tb))
        self._awaiting = None

    @property
    def pending(self) -> Decision | None:
        return self._awaiting

    def run(self, scheduler: Scheduler, until: int, max_decisions: int | None = None) -> int:
        """Drive with ``scheduler`` up to time ``until`` or ``max_decisions`` decisions; returns decisions made."""
        made = 0
        while max_decisions is None or made < max_decisions:
            d = self.advance(until)
            if d is None:
                break
            self.assign(scheduler.on_vehicle_entered(d))
            made += 1
        return made

    def bind(self, scheduler: Scheduler) -> None:
        self._scheduler = scheduler

    def step(self) -> list[TransmissionOutcome]:
        """Advance exactly one millisecond using the bound scheduler; returns that ms's outcomes."""
        if self._scheduler is None:
            raise RuntimeError("bind() a scheduler before stepping")
        self._outcome_sink = []
        try:
            self.run(self._scheduler, self.now + 1)
            return self._outcome_sink
        finally:
            self._outcome_sink = None

    def finish(self) -> list[WindowSnapshot]:
        """Flush reporting windows at the current time and close the trace."""
        self.windows.flush(self.now)
        if self.trace is not None:
            self.trace.close()
        return self.windows.windows

    # --- engine loop ---------------------------------------------------
    def _next_transmissions(self, t_limit: float):
        """Transmissions of the earliest pending occurrence that happen before ``t_limit``."""
        ids, *_ = self._present_arrays()
        if len(ids) == 0:
            return None
        frames = np.fromiter((self._next_frame[i] for i in ids.tolist()), dtype=np.int64, count=len(ids))
        k = int(frames.min())
        cols = np.flatnonzero(frames == k)
        tbs = np.fromiter((self.traffic.vehicles[i].assigned_tb for i in ids[cols].tolist()),
                          dtype=np.int64, count=len(cols))
        times = occurrence_start(k, self.period, self.n_sf) + tbs // self.n_sch
        t0 = int(times.min())
        keep = times < t_limit
        if not keep.any():
            return t0, None
        order = np.argsort(times[keep], kind="stable")
        return t0, (cols[keep][order], tbs[keep][order], times[keep][order], k)

    def _loop(self):
        while True:
            t_mob = self.traffic.next_event_time()
            t_mob = math.inf if t_mob is None else t_mob
            nxt = self._next_transmissions(min(t_mob, self._until))
            t_tx = math.inf if nxt is None else nxt[0]
            if min(t_mob, t_tx) >= self._until:
                self.now = max(self.now, self._until)
                yield _PAUSE
                continue
            if t_mob <= t_tx:
                yield from self._mobility(int(t_mob))
            else:
                self._transmit(*nxt[1])
                if self._memo is not None:
                    self._fast_forward(*nxt[1], t_limit=min(t_mob, self._until))

    def _mobility(self, t: int):
        self.now = t
        exited, entered = self.traffic.pop_events(t)
        self.windows.note_mobility(t, len(exited) + len(entered))
        for v in exited:
            self._next_frame.pop(v.id, None)
        self._present = None
        for v in entered:
            prr = self.reward_counter.prr()
            self.reward_counter.reset()
            self.windows.note_decision(t)
            self.n_decisions += 1
            yield Decision(v.id, v.direction, v.speed, t, prr, self.snapshot(exclude=v.id))

    def _transmit(self, cols: np.ndarray, tbs: np.ndarray, times: np.ndarray, frame: int) -> None:
        ids = self._present_arrays()[0]
        tx_ids = ids[cols]
        self.now = int(times[-1])
        if self.transmission_hook is not None:
            # the hook may reselect resources after each subframe
            groups = times
        else:
            # an occurrence straddling a reporting-window edge is accounted per window
            groups = times // self.windows.window_ms
        for g in np.unique(groups):
            m = groups == g
            self._resolve(tx_ids[m], tbs[m], times[m], cols[m])
        for vid in tx_ids.tolist():
            self._next_frame[vid] = frame + 1

    def _fast_forward(self, cols, tbs, times, frame: int, t_limit: float) -> None:
        """Replay memoized identical frames until the next mobility event or ``t_limit``.

        Applies when every present vehicle sent in ``frame``: nothing changes
        until the population does, so each later frame has the same outcome.
        """
        if self.trace is not None or self._outcome_sink is not None or self.transmission_hook is not None:
            return
        ids = self._present_arrays()[0]
        if len(cols) != len(ids):
            return
        key = (ids[cols].tobytes(), tbs.tobytes(), (times - times[0]).tobytes(), ids.tobytes())
        hit = self._memo.get(key)
        if hit is None:
            return
        succ, inr, counts = hit
        offset = int(times[0]) - occurrence_start(frame, self.period, self.n_sf)
        span = int(times[-1] - times[0])
        W = self.windows.window_ms
        n_tx = len(cols)
        j = frame + 1
        while True:
            t0 = occurrence_start(j, self.period, self.n_sf) + offset
            if t0 + span >= t_limit or t0 // W != (t0 + span) // W:
                break
            w, n, first = t0 // W, 0, t0
            while t0 + span < t_limit and t0 // W == w and (t0 + span) // W == w:
                n += 1
                self.now = t0 + span
                j += 1
                t0 = occurrence_start(j, self.period, self.n_sf) + offset
            self._account(first, succ * n, inr * n, counts * n, n_tx * n)
        for vid in ids.tolist():
            self._next_frame[vid] = j

    def _resolve(self, tx_ids, tbs, times, cols) -> None:
        ids = self._present_arrays()[0]
        key = None
        if self._memo is not None and self.trace is None and self._outcome_sink is None:
            key = (tx_ids.tobytes(), tbs.tobytes(), (times - times[0]).tobytes(), ids.tobytes())
            hit = self._memo.get(key)
            if hit is not None:
                self._account(int(times[0]), *hit, len(tx_ids))
                return
        d = self.distances(cols, times)
        res = self.channel.resolve(tx_ids, tbs, times, ids, d)
        succ, inr, counts = tally(res, d, self.bins)
        if key is not None:
            if len(self._memo) > 4096:
                self._memo.clear()
            self._memo[key] = (succ, inr, counts)
        self._account(int(times[0]), succ, inr, counts, len(tx_ids))
        if self.trace is not None:
            self.trace.write(tx_ids, tbs, times, ids, d, res)
        if self._outcome_sink is not None:
            for j in range(len(tx_ids)):
                m = res[j] != NOT_A_RECEIVER
                self._outcome_sink.append(TransmissionOutcome(
                    int(tx_ids[j]), int(tbs[j]), int(times[j]), ids[m], d[j, m], res[j, m]))
        if self.transmission_hook is not None:
            changes = self.transmission_hook(self, tx_ids, tbs, times, ids, d) or {}
            for vid, tb in sorted(changes.items()):
                self.reassign(vid, tb)

    def _account(self, t: int, succ, inr, counts, n_tx: int) -> None:
        self.windows.add(t, succ, inr, counts, n_tx)
        self.reward_counter.add(succ, inr, counts, n_tx)
        self.n_transmissions += n_tx
