"""Per-receiver reception outcomes under the SCD, MCD_RANGE and MCD_SINR models.

The half-duplex rule applies to every variant: a vehicle that transmits in a
subframe receives nothing sent in that subframe.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence

import numpy as np

from .scenario import ChannelConfig

SPEED_OF_LIGHT = 299_792_458.0


class Result(IntEnum):
    SUCCESS = 0
    HD_LOSS = 1
    COLLISION_LOSS = 2
    SINR_LOSS = 3
    OUT_OF_RANGE = 4


NOT_A_RECEIVER = -1


@dataclass(frozen=True)
class TransmissionOutcome:
    tx_vehicle: int
    tb: int
    time: int
    receivers: np.ndarray  # vehicle ids, transmitter excluded
    distances: np.ndarray
    results: np.ndarray  # Result codes

    def count(self, result: Result) -> int:
        return int(np.count_nonzero(self.results == result))


def winner_b1_los_db(d, antenna_height_m: float = 1.5, carrier_ghz: float = 6.0):
    """WINNER+ B1 line-of-sight pathloss (dB) as used for V2V in 3GPP TR 36.885.

    Both ends use the same antenna height; effective heights are ``h - 1 m``.
    """
    d = np.asarray(d, dtype=float)
    h_eff = antenna_height_m - 1.0
    d_bp = 4.0 * h_eff * h_eff * carrier_ghz * 1e9 / SPEED_OF_LIGHT
    fc_term = math.log10(carrier_ghz / 5.0)
    near = 22.7 * np.log10(d) + 41.0 + 20.0 * fc_term
    far = 40.0 * np.log10(d) + 9.45 - 2 * 17.3 * math.log10(h_eff) + 2.7 * fc_term
    return np.where(d < d_bp, near, far)


def free_space_db(d, carrier_ghz: float):
    d = np.asarray(d, dtype=float)
    return 20.0 * np.log10(4.0 * math.pi * d * carrier_ghz * 1e9 / SPEED_OF_LIGHT)


def pathloss_db(distance, cfg: ChannelConfig):
    """Pathloss in dB; distances below ``cfg.min_distance_m`` use the value at that distance."""
    d = np.maximum(np.asarray(distance, dtype=float), cfg.min_distance_m)
    if cfg.pathloss == "winner_b1":
        out = winner_b1_los_db(d, cfg.antenna_height_m, cfg.carrier_ghz)
    else:
        ref = free_space_db(cfg.min_distance_m, cfg.carrier_ghz)
        out = ref + 10.0 * cfg.pathloss_exponent * np.log10(d / cfg.min_distance_m)
    return float(out) if np.ndim(out) == 0 else out


def calibrate_threshold(cfg: ChannelConfig, target_range_m: float | None = None) -> float:
    """SINR threshold (dB) at which an interference-free link decodes out to the target range.

    Shadowing is zero-median, so this makes ``target_range_m`` the median range.
    """
    target = cfg.range_m if target_range_m is None else target_range_m
    return cfg.tx_power_dbm - pathloss_db(target, cfg) - cfg.noise_dbm


class ShadowingField:
    """Symmetric log-normal shadowing per vehicle pair, correlated over separation changes.

    Each update is a Gauss-Markov step ``new = rho*old + sqrt(1-rho^2)*N(0, sigma)``
    with ``rho = exp(-|d_new - d_old| / decorrelation)``.
    """

    def __init__(self, n: int, sigma_db: float, decorrelation_m: float):
        self.sigma = sigma_db
        self.decorrelation = decorrelation_m
        self.value = np.full((n, n), np.nan)
        self.separation = np.full((n, n), np.nan)

    def get(self, a: int, b: int) -> float:
        return float(self.value[a, b])

    def update(self, a: np.ndarray, b: np.ndarray, separation: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Advance pairs ``(a[i], b[i])`` to new separations; returns the new values."""
        old = self.value[a, b]
        noise = rng.standard_normal(len(a)) * self.sigma
        rho = np.exp(-np.abs(separation - np.nan_to_num(self.separation[a, b])) / self.decorrelation)
        fresh = np.isnan(old)
        new = np.where(fresh, noise, rho * np.nan_to_num(old) + np.sqrt(1.0 - rho * rho) * noise)
        self.value[a, b] = new
        self.value[b, a] = new
        self.separation[a, b] = separation
        self.separation[b, a] = separation
        return new


def sample_shadowing(field: ShadowingField, pair: tuple[int, int], new_separation: float,
                     rng: np.random.Generator) -> float:
    a, b = pair
    return float(field.update(np.array([a]), np.array([b]), np.array([float(new_separation)]), rng)[0])


class Channel:
    """Resolves batches of same-occurrence transmissions to per-receiver results."""

    def __init__(self, cfg: ChannelConfig, n_vehicles: int, rng: np.random.Generator):
        self.cfg = cfg
        self.variant = cfg.variant
        self.rng = rng
        self.threshold_db = (cfg.sinr_threshold_db if cfg.sinr_threshold_db is not None
                             else calibrate_threshold(cfg))
        self.noise_mw = 10.0 ** (cfg.noise_dbm / 10.0)
        self.shadowing = ShadowingField(n_vehicles, cfg.shadow_sigma_db, cfg.decorrelation_m)

    @property
    def position_independent(self) -> bool:
        return self.variant == "SCD"

    def sensed_energy(self, distances: np.ndarray) -> np.ndarray:
        """Energy a sensing receiver attributes to a transmission (Mode-4 occupancy)."""
        if self.variant == "SCD":
            return np.ones_like(distances, dtype=float)
        if self.variant == "MCD_RANGE":
            return (distances <= self.cfg.range_m).astype(float)
        return 10.0 ** ((self.cfg.tx_power_dbm - pathloss_db(distances, self.cfg)) / 10.0)

    def resolve(self, tx_ids: np.ndarray, tx_tbs: np.ndarray, tx_times: np.ndarray,
                rx_ids: np.ndarray, distances: np.ndarray) -> np.ndarray:
        """Result matrix ``(n_tx, n_rx)``; the transmitter's own column is ``NOT_A_RECEIVER``.

        ``distances[j, r]`` is the tx_j to rx_r distance at ``tx_times[j]``.
        Every transmitter must also appear in ``rx_ids``. All transmissions
        must belong to one pool occurrence.
        """
        tx_ids = np.asarray(tx_ids)
        tx_tbs = np.asarray(tx_tbs)
        tx_times = np.asarray(tx_times)
        n_tx, n_rx = len(tx_ids), len(rx_ids)
        is_self = tx_ids[:, None] == rx_ids[None, :]
        # time at which each receiver itself transmits in this batch (-1: silent)
        rx_tx_time = np.full(n_rx, -1, dtype=np.int64)
        col = np.searchsorted(rx_ids, tx_ids) if np.all(rx_ids[:-1] <= rx_ids[1:]) else \
            np.array([int(np.flatnonzero(rx_ids == i)[0]) for i in tx_ids])
        rx_tx_time[col] = tx_times
        hd = rx_tx_time[None, :] == tx_times[:, None]
        same_tb = (tx_tbs[:, None] == tx_tbs[None, :]) & (tx_times[:, None] == tx_times[None, :])
        np.fill_diagonal(same_tb, False)

        if self.variant == "SCD":
            collided = same_tb.any(axis=1)
            res = np.where(collided[:, None], Result.COLLISION_LOSS, Result.SUCCESS)
            res = np.broadcast_to(res, (n_tx, n_rx)).astype(np.int8)
        elif self.variant == "MCD_RANGE":
            in_range = distances <= self.cfg.range_m
            # interferer k hurts receiver r only if k itself reaches r
            interfered = (same_tb.astype(np.int32) @ in_range.astype(np.int32)) > 0
            res = np.full((n_tx, n_rx), Result.SUCCESS, dtype=np.int8)
            res[interfered] = Result.COLLISION_LOSS
            res[~in_range] = Result.OUT_OF_RANGE
        else:
            res = self._resolve_sinr(tx_ids, tx_times, rx_ids, distances, same_tb, is_self)
        res[hd] = Result.HD_LOSS
        res[is_self] = NOT_A_RECEIVER
        return res

    def _resolve_sinr(self, tx_ids, tx_times, rx_ids, distances, same_tb, is_self):
        n_tx, n_rx = distances.shape
        shadow = np.zeros((n_tx, n_rx))
        # shadowing evolves subframe by subframe, in time order
        for t in np.unique(tx_times):
            rows = np.flatnonzero(tx_times == t)
            a = np.repeat(tx_ids[rows], n_rx)
            b = np.tile(rx_ids, len(rows))
            sep = distances[rows].ravel()
            keep = a != b
            # a pair of co-subframe transmitters is one link: update it once
            both_tx = np.isin(b, tx_ids[rows])
            keep &= ~(both_tx & (a > b))
            self.shadowing.update(a[keep], b[keep], sep[keep], self.rng)
            shadow[rows] = self.shadowing.value[tx_ids[rows][:, None], rx_ids[None, :]]
        rx_dbm = self.cfg.tx_power_dbm - pathloss_db(distances, self.cfg) - np.nan_to_num(shadow)
        rx_mw = 10.0 ** (rx_dbm / 10.0)
        interference = same_tb.astype(float) @ rx_mw
        sinr_db = 10.0 * np.log10(rx_mw / (self.noise_mw + interference))
        res = np.where(sinr_db >= self.threshold_db, Result.SUCCESS, Result.SINR_LOSS).astype(np.int8)
        return res


def resolve_subframe(transmitters: Sequence[tuple[int, int]], receivers: Sequence[int],
                     distance, channel: Channel, time: int = 0,
                     n_subchannels: int | None = None) -> list[TransmissionOutcome]:
    """Outcomes of one subframe's transmissions.

    ``transmitters`` is a list of ``(vehicle_id, tb)``; ``receivers`` lists the
    other vehicles present; ``distance(a, b)`` gives the separation in meters.
    When ``n_subchannels`` is given, TBs spanning several subframes raise.
    """
    if n_subchannels is not None and len({tb // n_subchannels for _, tb in transmitters}) > 1:
        raise ValueError("transmissions from more than one subframe")
    tx_ids = np.array([v for v, _ in transmitters], dtype=np.int64)
    tx_tbs = np.array([tb for _, tb in transmitters], dtype=np.int64)
    everyone = np.array(sorted(set(receivers) | set(tx_ids.tolist())), dtype=np.int64)
    d = np.array([[distance(int(a), int(b)) if a != b else 0.0 for b in everyone] for a in tx_ids],
                 dtype=float).reshape(len(tx_ids), len(everyone))
    times = np.full(len(tx_ids), time, dtype=np.int64)
    res = channel.resolve(tx_ids, tx_tbs, times, everyone, d)
    out = []
    for j, (vid, tb) in enumerate(transmitters):
        mask = res[j] != NOT_A_RECEIVER
        out.append(TransmissionOutcome(vid, tb, time, everyone[mask], d[j, mask], res[j, mask]))
    return out
