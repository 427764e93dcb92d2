"""Actor and critic networks, action selection and the VRLS scheduler."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from ..mobility import Vehicle
from ..nnkit import LayerSpec, Network, NonFiniteError, log_softmax, softmax
from ..scenario import ScenarioConfig
from ..simcore import Decision
from .state import N_COLUMNS, Bookkeeping, build_state, shuffle_state


@dataclass(frozen=True)
class ArchConfig:
    conv1d_filters: int = 8
    conv1d_kernel: int = 3
    conv1d_stride: int = 1
    conv2d_filters: int = 8
    conv2d_kernel: tuple[int, int] = (3, 3)
    conv2d_stride: tuple[int, int] = (1, 1)

    def trunk(self) -> list[LayerSpec]:
        return [
            LayerSpec("CONV1D", filters=self.conv1d_filters, kernel=(self.conv1d_kernel,),
                      stride=(self.conv1d_stride,)),
            LayerSpec("ACT", activation="tanh"),
            LayerSpec("CONV2D", filters=self.conv2d_filters, kernel=tuple(self.conv2d_kernel),
                      stride=tuple(self.conv2d_stride)),
            LayerSpec("ACT", activation="tanh"),
        ]

    def actor(self, n_tbs: int) -> list[LayerSpec]:
        return self.trunk() + [LayerSpec("DENSE", units=n_tbs), LayerSpec("ACT", activation="softmax")]

    def critic(self) -> list[LayerSpec]:
        return self.trunk() + [LayerSpec("DENSE", units=1), LayerSpec("ACT", activation="linear")]

    def to_json(self) -> dict:
        d = asdict(self)
        d["conv2d_kernel"] = list(self.conv2d_kernel)
        d["conv2d_stride"] = list(self.conv2d_stride)
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "ArchConfig":
        d = dict(d)
        d["conv2d_kernel"] = tuple(d["conv2d_kernel"])
        d["conv2d_stride"] = tuple(d["conv2d_stride"])
        return cls(**d)


def build_networks(arch: ArchConfig, n_tbs: int, seed: int) -> tuple[Network, Network]:
    rng_a, rng_c = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    return (Network(arch.actor(n_tbs), (n_tbs, N_COLUMNS), rng_a),
            Network(arch.critic(), (n_tbs, N_COLUMNS), rng_c))


def policy_logits(actor: Network, states: np.ndarray) -> tuple[np.ndarray, list]:
    """Pre-softmax scores of a batch of (shuffled) states, with the cache for backward."""
    return actor.forward(states, upto=len(actor.layers) - 1)


def policy(actor: Network, state: np.ndarray) -> np.ndarray:
    z, _ = policy_logits(actor, state[None])
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("non-finite policy output")
    return softmax(z)[0]


def act(actor: Network, state: np.ndarray, pool, rng: np.random.Generator, mode: str = "sample"):
    """Choose a TB for an unshuffled state.

    The state is shuffled by subframe group, scored, and the chosen row is
    mapped back through the permutation. Returns ``(tb, row, shuffled_state, perm)``.
    Greedy mode takes the first maximal row of the shuffled presentation.
    """
    shuffled, perm = shuffle_state(state, pool, rng)
    p = policy(actor, shuffled)
    if mode == "greedy":
        row = int(np.argmax(p))
    elif mode == "sample":
        row = int(min(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"), len(p) - 1))
    else:
        raise ValueError(f"unknown action mode {mode!r}")
    return int(perm[row]), row, shuffled, perm


def log_policy(actor: Network, states: np.ndarray) -> np.ndarray:
    z, _ = policy_logits(actor, states)
    return log_softmax(z)


class VrlsScheduler:
    """Centralized scheduler driven by a trained actor network."""

    name = "vrls"

    def __init__(self, config: ScenarioConfig, actor: Network, rng: np.random.Generator, mode: str = "greedy"):
        if actor.output_shape != (config.n_tbs,):
            raise ValueError(f"policy has {actor.output_shape[0]} outputs but the pool has {config.n_tbs} TBs")
        self.config = config
        self.pool = config.pool
        self.actor = actor
        self.rng = rng
        self.mode = mode
        self.book = Bookkeeping(config.n_tbs, config.geometry.length, config.max_vehicles_per_direction)

    def on_initial_assignment(self, vehicle: Vehicle, tb: int) -> None:
        self.book.record(tb, vehicle.direction, vehicle.speed, vehicle.entry_time)

    def on_vehicle_entered(self, decision: Decision) -> int:
        state = build_state(self.book, decision.direction, decision.time)
        tb, *_ = act(self.actor, state, self.pool, self.rng, self.mode)
        self.book.record(tb, decision.direction, decision.speed, decision.time)
        return tb
