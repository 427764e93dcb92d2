"""``doca`` command line: train, retrain, eval and compare.

Exit codes: 0 success, 1 configuration error, 2 runtime error, 3 a requested
acceptance gate (``--min-*`` flags or a trace recount) failed.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

from .scenario import ENV_PREFIX, ConfigError, ScenarioConfig, resolve_scenario
from .schedulers import SCHEDULER_NAMES, Mode4Scheduler, OracleScheduler, RandomScheduler, attach
from .simcore import Simulation, TraceWriter, WindowSnapshot, recount_trace
from .vrls import Policy, PoolMismatchError, TrainConfig, VrlsScheduler, load_policy, retrain, save_policy, train
from .vrls.train import curve_writer

log = logging.getLogger("doca")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_GATE = 0, 1, 2, 3
DEFAULT_MIN_ACTIONS = 1000


# --- evaluation ----------------------------------------------------------------

def default_warmup_ms(config: ScenarioConfig) -> int:
    """Whole reporting windows covering one traversal, so the random start-up population has left."""
    w = config.prr_window_ms
    return int(math.ceil(config.traversal_ms / w)) * w


def make_scheduler(name: str, config: ScenarioConfig, seed: int, policy: Policy | None = None):
    rng = np.random.default_rng([seed, 7])
    if name == "random":
        return RandomScheduler(config.pool, rng)
    if name == "mode4":
        return Mode4Scheduler(config, rng)
    if name == "oracle":
        if config.channel.variant != "SCD":
            raise ConfigError("scheduler", "oracle applies to single-collision-domain scenarios only")
        return OracleScheduler(config)
    if name == "vrls":
        if policy is None:
            raise ConfigError("checkpoint", "the vrls scheduler needs --checkpoint")
        if policy.n_tbs != config.n_tbs:
            raise ConfigError("checkpoint", f"policy has {policy.n_tbs} TBs, scenario has {config.n_tbs}")
        if seed in policy.meta.get("sim_seeds", []):
            raise ConfigError("seed", "evaluation seed coincides with a training seed")
        return VrlsScheduler(config, policy.actor(), rng, mode="greedy")
    raise ConfigError("scheduler", f"unknown scheduler {name!r}; valid: {', '.join(SCHEDULER_NAMES)}")


@dataclass
class RunReport:
    scenario: str
    scheduler: str
    seed: int
    bins: list
    windows: list[WindowSnapshot]
    n_actions: int
    warmup_ms: int
    wall_clock_s: float = 0.0
    trace_path: str | None = None
    extra: dict = field(default_factory=dict)

    def prr_samples(self) -> np.ndarray:
        return np.array([w.prr.min for w in self.windows if w.prr.min is not None], dtype=float)

    def summary(self) -> dict:
        return summarize(self.prr_samples(), self.windows) | {"n_actions": self.n_actions}


def summarize(samples: np.ndarray, windows: Sequence[WindowSnapshot]) -> dict:
    out = {"n_windows": len(windows), "n_samples": int(len(samples)),
           "hd_loss_windows": sum(1 for w in windows if w.hd_losses > 0),
           "collision_windows": sum(1 for w in windows if w.collisions > 0)}
    if len(samples):
        p1, p25, med, p75, p99 = np.percentile(samples, [1, 25, 50, 75, 99])
        out.update(mean=float(samples.mean()), median=float(med), p1=float(p1), p25=float(p25),
                   p75=float(p75), p99=float(p99), nonzero_fraction=float(np.mean(samples > 0)))
    return out


def run_eval(config: ScenarioConfig, scheduler_name: str, seed: int, *, policy: Policy | None = None,
             duration_s: float | None = None, min_actions: int = DEFAULT_MIN_ACTIONS,
             warmup_ms: int | None = None, trace_path: str | None = None) -> RunReport:
    """Evaluate one scheduler on one seed.

    Runs window by window past the warm-up until the measured part covers
    ``duration_s`` and holds at least ``min_actions`` scheduler decisions.
    Only full windows starting at or after the warm-up are reported.
    """
    t_wall = time.perf_counter()
    scheduler = make_scheduler(scheduler_name, config, seed, policy)
    trace = TraceWriter(trace_path) if trace_path else None
    sim = Simulation(config, seed, trace=trace)
    attach(sim, scheduler)
    W = config.prr_window_ms
    warm = default_warmup_ms(config) if warmup_ms is None else int(math.ceil(warmup_ms / W)) * W
    sim.run(scheduler, warm)
    start_decisions = sim.n_decisions
    min_end = warm + (0 if duration_s is None else int(math.ceil(duration_s * 1000 / W)) * W)
    end = warm
    while end < min_end or sim.n_decisions - start_decisions < min_actions or end == warm:
        end += W
        sim.run(scheduler, end)
    windows = [w for w in sim.finish() if not w.partial and w.start_ms >= warm]
    return RunReport(config.name, scheduler_name, seed, [list(b) for b in config.prr_range_bins], windows,
                     sim.n_decisions - start_decisions, warm, time.perf_counter() - t_wall, trace_path)


def check_trace(report: RunReport, config: ScenarioConfig) -> bool:
    """True when a brute-force recount of the trace reproduces every reported window."""
    recount = recount_trace(report.trace_path, config.prr_range_bins, config.prr_window_ms)
    n_bins = len(config.prr_range_bins)
    for w in report.windows:
        succ, inr = recount.get(w.index, ([0] * n_bins, [0] * n_bins))
        if tuple(succ) != w.successes or tuple(inr) != w.in_range:
            return False
    return True


CSV_HEAD = ["scenario", "scheduler", "seed", "window", "start_ms", "end_ms", "n_transmissions",
            "n_decisions", "n_mobility_events", "hd_losses", "collisions", "prr_min"]


def window_rows(report: RunReport) -> list[list]:
    rows = []
    for w in report.windows:
        per_bin = []
        for s, n, p in zip(w.successes, w.in_range, w.prr.per_bin):
            per_bin += [s, n, "" if p is None else repr(p)]
        rows.append([report.scenario, report.scheduler, report.seed, w.index, w.start_ms, w.end_ms,
                     w.n_transmissions, w.n_decisions, w.n_mobility_events, w.hd_losses, w.collisions,
                     "" if w.prr.min is None else repr(w.prr.min)] + per_bin)
    return rows


def csv_header(n_bins: int) -> list[str]:
    head = list(CSV_HEAD)
    for i in range(n_bins):
        head += [f"succ_{i}", f"in_range_{i}", f"prr_{i}"]
    return head


def write_csv(path: Path, reports: Sequence[RunReport]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(csv_header(len(reports[0].bins) if reports else 0))
    for r in reports:
        writer.writerows(window_rows(r))
    path.write_text(buf.getvalue())


def summary_from_csv(path: Path) -> dict:
    """Recompute the headline statistics from a window CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    prr = np.array([float(r["prr_min"]) for r in rows if r["prr_min"] != ""])
    p1, p25, med, p75, p99 = np.percentile(prr, [1, 25, 50, 75, 99])
    return {"mean": float(prr.mean()), "median": float(med), "p1": float(p1), "p25": float(p25),
            "p75": float(p75), "p99": float(p99),
            "hd_loss_windows": sum(1 for r in rows if int(r["hd_losses"]) > 0),
            "collision_windows": sum(1 for r in rows if int(r["collisions"]) > 0)}


# --- config plumbing ---------------------------------------------------------

def train_config(args, environ: Mapping[str, str]) -> TrainConfig:
    """Defaults, then ``DOCA_TRAIN__<FIELD>`` variables, then explicit flags."""
    cfg = TrainConfig()
    names = {f.name for f in dataclasses.fields(TrainConfig)} - {"arch"}
    changes = {}
    for var, raw in sorted(environ.items()):
        prefix = f"{ENV_PREFIX}TRAIN__"
        if var.startswith(prefix) and var[len(prefix):].lower() in names:
            changes[var[len(prefix):].lower()] = yaml.safe_load(raw)
    for flag in ("epochs", "workers", "seed"):
        value = getattr(args, flag, None)
        if value is not None:
            changes[flag] = value
    if getattr(args, "sync", None) is not None:
        changes["sync"] = args.sync
    try:
        cfg = dataclasses.replace(cfg, **changes)
    except TypeError as exc:
        raise ConfigError("train", str(exc)) from None
    if cfg.workers < 1 or cfg.epochs < 0 or cfg.actions_per_epoch < 1:
        raise ConfigError("train", "workers and actions_per_epoch must be positive, epochs non-negative")
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_policy(path) -> Policy:
    try:
        return load_policy(path)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError("checkpoint", f"cannot read {path}: {exc}") from None


def _write_summary(path: Path, blocks: dict) -> None:
    path.write_text(yaml.safe_dump(blocks, sort_keys=False))


def _gate(summary: dict, args) -> list[str]:
    failures = []
    for key, flag in (("mean", "min_mean"), ("median", "min_median"), ("nonzero_fraction", "min_nonzero")):
        bound = getattr(args, flag, None)
        if bound is not None and summary.get(key, -math.inf) < bound:
            failures.append(f"{key} {summary.get(key)} < {bound}")
    bound = getattr(args, "max_collision_windows", None)
    if bound is not None and summary["n_windows"] and summary["collision_windows"] / summary["n_windows"] > bound:
        failures.append(f"collision windows {summary['collision_windows']}/{summary['n_windows']} > {bound}")
    return failures


# --- commands ----------------------------------------------------------------

def cmd_train(args, environ) -> int:
    config = resolve_scenario(args.scenario, environ)
    cfg = train_config(args, environ)
    out = _out_dir(args)
    result = train(config, cfg, on_epoch=curve_writer(out / "curve.jsonl"))
    save_policy(out / "policy.ckpt", result)
    log.info("trained %d epochs on %s -> %s", cfg.epochs, config.name, out / "policy.ckpt")
    return EXIT_OK


def cmd_retrain(args, environ) -> int:
    config = resolve_scenario(args.scenario, environ)
    cfg = train_config(args, environ)
    policy = _load_policy(args.checkpoint)
    out = _out_dir(args)
    try:
        result = retrain(policy, config, cfg, resume=args.resume, on_epoch=curve_writer(out / "curve.jsonl"))
    except PoolMismatchError as exc:
        raise ConfigError("checkpoint", str(exc)) from None
    save_policy(out / "policy.ckpt", result)
    return EXIT_OK


def cmd_eval(args, environ) -> int:
    config = resolve_scenario(args.scenario, environ)
    policy = _load_policy(args.checkpoint) if args.checkpoint else None
    out = _out_dir(args)
    seed = config.seed if args.seed is None else args.seed
    trace = str(out / "trace.csv.gz") if args.trace else None
    report = run_eval(config, args.scheduler, seed, policy=policy, duration_s=args.duration,
                      min_actions=args.min_actions, warmup_ms=args.warmup_ms, trace_path=trace)
    write_csv(out / "windows.csv", [report])
    summary = report.summary()
    block = {"scenario": config.name, "scheduler": args.scheduler, "seed": seed,
             "warmup_ms": report.warmup_ms, "summary": summary, "wall_clock_s": round(report.wall_clock_s, 3)}
    failures = _gate(summary, args)
    if trace is not None:
        ok = check_trace(report, config)
        block["trace_recount_matches"] = ok
        if not ok:
            failures.append("trace recount differs from the accumulator")
    block["gate_failures"] = failures
    _write_summary(out / "summary.yaml", block)
    print(yaml.safe_dump(block, sort_keys=False), end="")
    return EXIT_GATE if failures else EXIT_OK


def cmd_compare(args, environ) -> int:
    config = resolve_scenario(args.scenario, environ)
    names = [s.strip() for s in args.schedulers.split(",") if s.strip()]
    unknown = [n for n in names if n not in SCHEDULER_NAMES]
    if unknown:
        raise ConfigError("schedulers", f"unknown {unknown}; valid: {', '.join(SCHEDULER_NAMES)}")
    seeds = [int(s) for s in args.seeds.split(",")]
    policy = _load_policy(args.checkpoint) if args.checkpoint else None
    out = _out_dir(args)
    reports, blocks, errors = [], {}, {}
    for name in names:
        mine = []
        try:
            for seed in seeds:
                mine.append(run_eval(config, name, seed, policy=policy, duration_s=args.duration,
                                     min_actions=args.min_actions, warmup_ms=args.warmup_ms))
        except Exception as exc:  # report per scheduler, keep the others
            errors[name] = f"{type(exc).__name__}: {exc}"
            log.error("scheduler %s failed: %s", name, errors[name])
            continue
        reports += mine
        pooled = np.concatenate([r.prr_samples() for r in mine])
        blocks[name] = {"pooled": summarize(pooled, [w for r in mine for w in r.windows])
                        | {"n_actions": sum(r.n_actions for r in mine)},
                        "per_seed": {r.seed: r.summary() for r in mine}}
    if reports:
        write_csv(out / "compare.csv", reports)
    doc = {"scenario": config.name, "seeds": seeds, "schedulers": blocks, "errors": errors}
    _write_summary(out / "summary.yaml", doc)
    print(yaml.safe_dump(doc, sort_keys=False), end="")
    if not reports:
        return EXIT_RUNTIME
    return EXIT_RUNTIME if errors else EXIT_OK


# --- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="doca", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scheduler=False):
        sp.add_argument("--scenario", required=True, help="built-in name or YAML path")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default="runs")
        if scheduler:
            sp.add_argument("--checkpoint", default=None)
            sp.add_argument("--duration", type=float, default=None, help="measured seconds after warm-up (minimum)")
            sp.add_argument("--min-actions", type=int, default=DEFAULT_MIN_ACTIONS)
            sp.add_argument("--warmup-ms", type=int, default=None)

    def training(sp):
        sp.add_argument("--epochs", type=int, default=None)
        sp.add_argument("--workers", type=int, default=None)
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--sync", dest="sync", action="store_true", default=None, help="deterministic lockstep mode")
        g.add_argument("--async", dest="sync", action="store_false", help="threaded asynchronous workers")

    tr = sub.add_parser("train", help="train a VRLS policy")
    common(tr)
    training(tr)

    rt = sub.add_parser("retrain", help="continue training a policy on another scenario")
    common(rt)
    training(rt)
    rt.add_argument("--checkpoint", required=True)
    rt.add_argument("--resume", action="store_true", help="carry over the step-size schedule and optimizer state")

    ev = sub.add_parser("eval", help="evaluate one scheduler")
    common(ev, scheduler=True)
    ev.add_argument("--scheduler", required=True)
    ev.add_argument("--trace", action="store_true", help="write the per-receiver trace and verify a recount")
    ev.add_argument("--min-mean", type=float, default=None)
    ev.add_argument("--min-median", type=float, default=None)
    ev.add_argument("--min-nonzero", type=float, default=None)
    ev.add_argument("--max-collision-windows", type=float, default=None)

    cp = sub.add_parser("compare", help="evaluate several schedulers over several seeds")
    common(cp, scheduler=True)
    cp.add_argument("--schedulers", default="random,mode4,vrls")
    cp.add_argument("--seeds", default="1,2,3")
    return p


COMMANDS = {"train": cmd_train, "retrain": cmd_retrain, "eval": cmd_eval, "compare": cmd_compare}


def main(argv: Sequence[str] | None = None, environ: Mapping[str, str] | None = None) -> int:
    environ = os.environ if environ is None else environ
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, environ)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
