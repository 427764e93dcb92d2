"""Advantage actor-critic training with parallel workers and a central coordinator.

In synchronous mode every worker collects one trajectory per round against
the same parameter snapshot; the coordinator averages the gradients in worker
order and applies one update, so a run is a pure function of its seeds. In
asynchronous mode workers are threads that pull a snapshot, collect, and push
their gradients whenever they are done.
"""
from __future__ import annotations

import json
import logging
import threading
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..nnkit import SGD, Network, RMSProp, learning_rate, load_checkpoint, log_softmax, save_checkpoint
from ..scenario import ScenarioConfig, to_dict
from ..simcore import Simulation
from .agent import ArchConfig, act, build_networks, policy_logits
from .state import Bookkeeping, build_state, compute_reward, shuffle_state

log = logging.getLogger(__name__)

FOREVER = 2 ** 62


@dataclass(frozen=True)
class TrainConfig:
    workers: int = 16
    epochs: int = 500
    actions_per_epoch: int = 60
    gamma: float = 0.99
    beta: float = 0.01
    lr_base: float = 1e-3
    lr_decay: float = 0.01
    lr_power: float = 1.1
    rms_decay: float = 0.99
    rms_eps: float = 1e-5
    momentum: float = 0.0
    optimizer: str = "rmsprop"  # "adam" (bias-corrected averages, see nnkit.RMSProp) or "sgd"
    normalize_advantages: bool = False
    n_step: int = 0  # 0: bootstrap only at the end of the trajectory
    value_scale: float = 100.0
    sync: bool = True
    seed: int = 0
    arch: ArchConfig = field(default_factory=ArchConfig)

    def lr(self, epoch: int) -> float:
        return learning_rate(epoch, self.lr_base, self.lr_decay, self.lr_power)

    def make_optimizer(self, sq: dict | None = None, mom: dict | None = None, steps: int = 0) -> RMSProp | SGD:
        if self.optimizer == "sgd":
            return SGD(steps=steps)
        if self.optimizer not in ("rmsprop", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        return RMSProp(self.rms_decay, self.rms_eps, self.momentum, dict(sq or {}), dict(mom or {}),
                       debias=self.optimizer == "adam", steps=steps)

    def to_json(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.to_json()
        return d

    @classmethod
    def from_json(cls, d) -> "TrainConfig":
        d = dict(d)
        d["arch"] = ArchConfig.from_json(d["arch"])
        return cls(**d)


def training_seeds(seed: int, workers: int) -> tuple[int, list[int]]:
    """Network-initialization seed and one simulation seed per worker."""
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(workers + 1)
    init = int(children[0].generate_state(1, dtype=np.uint64)[0])
    sims = [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children[1:]]
    return init, sims


@dataclass
class Trajectory:
    states: np.ndarray  # (n, n_tbs, 4), as shown to the networks
    rows: np.ndarray  # chosen row of each shuffled state
    rewards: np.ndarray
    prrs: np.ndarray  # min-bin PRR of each reward interval, NaN when empty
    bootstrap: np.ndarray  # shuffled state after the last action


class Worker:
    """One simulation instance plus the scheduler bookkeeping that goes with it."""

    def __init__(self, index: int, config: ScenarioConfig, sim_seed: int, arch: ArchConfig, init_seed: int):
        self.index = index
        self.config = config
        self.sim_seed = sim_seed
        self.sim = Simulation(config, sim_seed)
        self.rng = np.random.default_rng([sim_seed, 1])
        self.book = Bookkeeping(config.n_tbs, config.geometry.length, config.max_vehicles_per_direction)
        for v in self.sim.initial_vehicles:
            self.book.record(v.assigned_tb, v.direction, v.speed, v.entry_time)
        self.actor, self.critic = build_networks(arch, config.n_tbs, init_seed)
        self.pending = None
        self.prev_reward = 0.0

    def rollout(self, actor_params, n: int) -> Trajectory:
        self.actor.set_params(actor_params)
        states, rows, rewards, prrs = [], [], [], []
        d = self.pending if self.pending is not None else self.sim.advance(FOREVER)
        for _ in range(n):
            s = build_state(self.book, d.direction, d.time)
            tb, row, shuffled, _ = act(self.actor, s, self.config.pool, self.rng, "sample")
            self.sim.assign(tb)
            self.book.record(tb, d.direction, d.speed, d.time)
            states.append(shuffled)
            rows.append(row)
            d = self.sim.advance(FOREVER)
            r = compute_reward(d.reward_prr, self.prev_reward)
            self.prev_reward = r
            rewards.append(r)
            prrs.append(np.nan if d.reward_prr.empty else d.reward_prr.min)
        self.pending = d
        boot, _ = shuffle_state(build_state(self.book, d.direction, d.time), self.config.pool, self.rng)
        return Trajectory(np.array(states), np.array(rows), np.array(rewards), np.array(prrs), boot)


def nstep_returns(rewards: np.ndarray, values: np.ndarray, gamma: float, n_step: int = 0) -> np.ndarray:
    """Discounted returns bootstrapped from ``values`` (one longer than ``rewards``).

    ``R_t = sum_{k<m} gamma^k r_{t+k} + gamma^m V_{t+m}`` with
    ``m = min(n_step, T - t)``; ``n_step <= 0`` means ``m = T - t``.
    """
    T = len(rewards)
    n = T if n_step <= 0 else n_step
    ret = np.empty(T)
    for t in range(T):
        m = min(n, T - t)
        acc = values[t + m]
        for k in range(m - 1, -1, -1):
            acc = rewards[t + k] + gamma * acc
        ret[t] = acc
    return ret


def trajectory_gradients(actor: Network, critic: Network, traj: Trajectory, gamma: float, beta: float,
                         value_scale: float = 1.0, n_step: int = 0, normalize: bool = False):
    """Gradients of the n-step actor-critic losses over one trajectory.

    Actor loss ``sum(-log pi(a|s) * A - beta * H)``, critic loss
    ``0.5 * sum(((R - V) / value_scale)^2)`` with bootstrapped discounted
    returns ``R``; the critic network outputs ``V / value_scale``. With
    ``normalize`` the actor sees the advantages standardized over the trajectory.
    """
    n = len(traj.rows)
    both = np.concatenate([traj.states, traj.bootstrap[None]])
    out, vcache = critic.forward(both)
    values = out * value_scale
    ret = nstep_returns(traj.rewards, values[:, 0], gamma, n_step)
    adv = ret - values[:n, 0]
    gv = np.zeros_like(values)
    gv[:n, 0] = -adv / value_scale
    g_critic = critic.backward(vcache, gv)
    adv_actor = (adv - adv.mean()) / (adv.std() + 1e-8) if normalize else adv

    z, acache = policy_logits(actor, traj.states)
    logp = log_softmax(z)
    p = np.exp(logp)
    entropy = -np.sum(p * logp, axis=1)
    onehot = np.zeros_like(p)
    onehot[np.arange(n), traj.rows] = 1.0
    dz = adv_actor[:, None] * (p - onehot) + beta * p * (logp + entropy[:, None])
    g_actor = actor.backward(acache, dz)
    stats = {"value_loss": float(0.5 * np.sum(adv * adv)), "entropy": float(entropy.mean()),
             "mean_value": float(values[:n, 0].mean()), "mean_return": float(ret.mean())}
    return g_actor, g_critic, stats


def _worker_gradients(w: "Worker", traj: Trajectory, critic_params: dict, cfg: TrainConfig):
    w.critic.set_params(critic_params)
    return trajectory_gradients(w.actor, w.critic, traj, cfg.gamma, cfg.beta, cfg.value_scale, cfg.n_step,
                                cfg.normalize_advantages)


def _mean_grads(grads: Sequence[dict]) -> dict:
    out = {}
    for name in grads[0]:
        acc = grads[0][name].copy()
        for g in grads[1:]:
            acc += g[name]
        out[name] = acc / len(grads)
    return out


class Coordinator:
    """Sole writer of the global parameters; hands out immutable snapshots."""

    def __init__(self, actor_params: dict, critic_params: dict, cfg: TrainConfig, epoch: int = 0,
                 opt_actor: RMSProp | None = None, opt_critic: RMSProp | None = None):
        self.cfg = cfg
        self.actor_params = dict(actor_params)
        self.critic_params = dict(critic_params)
        self.epoch = epoch
        self.opt_actor = opt_actor or cfg.make_optimizer()
        self.opt_critic = opt_critic or cfg.make_optimizer()
        self.lock = threading.Lock()

    def snapshot(self):
        with self.lock:
            return self.actor_params, self.critic_params, self.epoch

    def apply(self, g_actor: dict, g_critic: dict) -> float:
        with self.lock:
            lr = self.cfg.lr(self.epoch)
            new_actor = self.opt_actor.step(self.actor_params, g_actor, lr)
            new_critic = self.opt_critic.step(self.critic_params, g_critic, lr)
            self.actor_params, self.critic_params = new_actor, new_critic
            self.epoch += 1
            return lr


@dataclass
class TrainResult:
    coordinator: Coordinator
    curve: list[dict]
    init_seed: int
    sim_seeds: list[int]
    cfg: TrainConfig
    scenario: ScenarioConfig
    start_epoch: int = 0

    def actor(self) -> Network:
        actor, _ = build_networks(self.cfg.arch, self.scenario.n_tbs, self.init_seed)
        actor.set_params(self.coordinator.actor_params)
        return actor


def _curve_record(epoch: int, trajs: Sequence[Trajectory], lr: float, stats: Sequence[dict]) -> dict:
    rewards = np.concatenate([t.rewards for t in trajs])
    prrs = np.concatenate([t.prrs for t in trajs])
    prrs = prrs[~np.isnan(prrs)]
    return {"epoch": epoch, "mean_reward": float(rewards.mean()),
            "mean_prr": float(prrs.mean()) if len(prrs) else None, "lr": lr,
            "entropy": float(np.mean([s["entropy"] for s in stats])),
            "mean_value": float(np.mean([s["mean_value"] for s in stats])),
            "mean_return": float(np.mean([s["mean_return"] for s in stats]))}


def train(scenario: ScenarioConfig, cfg: TrainConfig, *, coordinator: Coordinator | None = None,
          on_epoch: Callable[[dict], None] | None = None, init_seed: int | None = None) -> TrainResult:
    """Run ``cfg.epochs`` coordinator updates (one per round in sync mode, one per trajectory otherwise)."""
    seed0, sim_seeds = training_seeds(cfg.seed, cfg.workers)
    init_seed = seed0 if init_seed is None else init_seed
    if coordinator is None:
        actor, critic = build_networks(cfg.arch, scenario.n_tbs, init_seed)
        coordinator = Coordinator(actor.params, critic.params, cfg)
    start = coordinator.epoch
    target = start + cfg.epochs
    workers = [Worker(i, scenario, s, cfg.arch, init_seed) for i, s in enumerate(sim_seeds)]
    curve: list[dict] = []

    def record(rec: dict) -> None:
        curve.append(rec)
        if on_epoch is not None:
            on_epoch(rec)

    if cfg.sync:
        while coordinator.epoch < target:
            actor_p, critic_p, epoch = coordinator.snapshot()
            trajs, ga, gc, stats = [], [], [], []
            for w in workers:
                traj = w.rollout(actor_p, cfg.actions_per_epoch)
                a, c, st = _worker_gradients(w, traj, critic_p, cfg)
                trajs.append(traj)
                ga.append(a)
                gc.append(c)
                stats.append(st)
            lr = coordinator.apply(_mean_grads(ga), _mean_grads(gc))
            record(_curve_record(epoch, trajs, lr, stats))
    else:
        _train_async(workers, coordinator, cfg, target, record)
    return TrainResult(coordinator, curve, init_seed, sim_seeds, cfg, scenario, start)


def _train_async(workers, coordinator: Coordinator, cfg: TrainConfig, target: int, record) -> None:
    record_lock = threading.Lock()
    failures: list[BaseException] = []

    def run(w: Worker) -> None:
        try:
            while True:
                actor_p, critic_p, _ = coordinator.snapshot()
                if coordinator.epoch >= target:
                    return
                traj = w.rollout(actor_p, cfg.actions_per_epoch)
                a, c, st = _worker_gradients(w, traj, critic_p, cfg)
                with record_lock:
                    if coordinator.epoch >= target:
                        return
                    epoch = coordinator.epoch
                    lr = coordinator.apply(a, c)
                    record(_curve_record(epoch, [traj], lr, [st]))
        except FloatingPointError as exc:
            failures.append(exc)
        except Exception as exc:  # a dead worker must not stall the others
            log.error("worker %d died: %r", w.index, exc)
            failures.append(exc)

    threads = [threading.Thread(target=run, args=(w,), name=f"worker-{w.index}") for w in workers]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    fatal = [f for f in failures if isinstance(f, FloatingPointError)]
    if fatal:
        raise fatal[0]
    if coordinator.epoch < target:
        raise RuntimeError(f"all workers died after {coordinator.epoch} epochs: {failures[0]!r}")


# --- checkpoints -------------------------------------------------------------

def save_policy(path, result: TrainResult) -> None:
    c = result.coordinator
    meta = {
        "kind": "vrls-policy",
        "n_tbs": result.scenario.n_tbs,
        "scenario": to_dict(result.scenario),
        "train": result.cfg.to_json(),
        "epoch": c.epoch,
        "opt_steps": [c.opt_actor.steps, c.opt_critic.steps],
        "init_seed": result.init_seed,
        "sim_seeds": result.sim_seeds,
    }
    arrays = {}
    for prefix, params in (("actor", c.actor_params), ("critic", c.critic_params),
                           ("rms_actor", c.opt_actor.sq), ("rms_critic", c.opt_critic.sq),
                           ("mom_actor", c.opt_actor.mom), ("mom_critic", c.opt_critic.mom)):
        for k, v in params.items():
            arrays[f"{prefix}/{k}"] = v
    save_checkpoint(path, meta, arrays)


@dataclass
class Policy:
    meta: dict
    actor_params: dict
    critic_params: dict
    rms_actor: dict
    rms_critic: dict
    mom_actor: dict
    mom_critic: dict

    @property
    def n_tbs(self) -> int:
        return self.meta["n_tbs"]

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_json(self.meta["train"])

    def actor(self) -> Network:
        actor, _ = build_networks(self.train_config.arch, self.n_tbs, self.meta["init_seed"])
        actor.set_params(self.actor_params)
        return actor


def load_policy(path) -> Policy:
    meta, arrays = load_checkpoint(path)
    if meta.get("kind") != "vrls-policy":
        raise ValueError(f"{path} is not a VRLS policy checkpoint")
    parts: dict[str, dict] = {k: {} for k in ("actor", "critic", "rms_actor", "rms_critic", "mom_actor", "mom_critic")}
    for name, a in arrays.items():
        prefix, key = name.split("/", 1)
        parts[prefix][key] = a
    return Policy(meta, parts["actor"], parts["critic"], parts["rms_actor"], parts["rms_critic"],
                  parts["mom_actor"], parts["mom_critic"])


class PoolMismatchError(ValueError):
    pass


def retrain(policy: Policy, scenario: ScenarioConfig, cfg: TrainConfig, *, resume: bool = False,
            on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Continue training a policy on another scenario with the same number of TBs.

    By default the step-size schedule and the optimizer statistics restart;
    ``resume=True`` carries both over from the checkpoint.
    """
    if policy.n_tbs != scenario.n_tbs:
        raise PoolMismatchError(f"checkpoint has {policy.n_tbs} TBs but scenario {scenario.name} has {scenario.n_tbs}")
    cfg = replace(cfg, arch=policy.train_config.arch)
    if resume:
        steps_a, steps_c = policy.meta.get("opt_steps", (0, 0))
        opt_a = cfg.make_optimizer(policy.rms_actor, policy.mom_actor, steps_a)
        opt_c = cfg.make_optimizer(policy.rms_critic, policy.mom_critic, steps_c)
        epoch = int(policy.meta["epoch"])
    else:
        opt_a = opt_c = None
        epoch = 0
    coord = Coordinator(policy.actor_params, policy.critic_params, cfg, epoch, opt_a, opt_c)
    return train(scenario, cfg, coordinator=coord, on_epoch=on_epoch, init_seed=int(policy.meta["init_seed"]))


def write_curve(path, curve: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in curve:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def curve_writer(path) -> Callable[[dict], None]:
    """Append-as-you-go JSON-lines sink for ``on_epoch``."""
    Path(path).write_text("")

    def emit(rec: dict) -> None:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    return emit
