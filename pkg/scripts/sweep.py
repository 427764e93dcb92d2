"""Train several TrainConfig variants on one scenario and evaluate each greedily.

    python scripts/sweep.py SCD_I --epochs 150 --workers 8 \
        --variant base '{}' --variant short '{"gamma": 0.2, "value_scale": 1, "normalize_advantages": true}'

Prints one line per variant: final training PRR, final policy entropy and the
pooled evaluation summary over the evaluation seeds.
"""
import argparse
import json
import time

import numpy as np

from doca.cli import run_eval, summarize
from doca.scenario import builtin_scenario
from doca.vrls import Policy, TrainConfig, train


def as_policy(result) -> Policy:
    c = result.coordinator
    meta = {"n_tbs": result.scenario.n_tbs, "train": result.cfg.to_json(), "init_seed": result.init_seed,
            "sim_seeds": result.sim_seeds}
    return Policy(meta, c.actor_params, c.critic_params, {}, {}, {}, {})


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("scenario")
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--workers", type=int, default=8)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--eval-seeds", default="11,12,13")
    p.add_argument("--duration", type=float, default=600.0)
    p.add_argument("--variant", nargs=2, action="append", metavar=("NAME", "JSON"), required=True)
    args = p.parse_args()

    sc = builtin_scenario(args.scenario)
    seeds = [int(s) for s in args.eval_seeds.split(",")]
    for name, raw in args.variant:
        t0 = time.perf_counter()
        cfg = TrainConfig(workers=args.workers, epochs=args.epochs, seed=args.seed, **json.loads(raw))
        result = train(sc, cfg)
        pol = as_policy(result)
        reports = [run_eval(sc, "vrls", s, policy=pol, duration_s=args.duration) for s in seeds]
        pooled = summarize(np.concatenate([r.prr_samples() for r in reports]), [w for r in reports for w in r.windows])
        last = [r["mean_prr"] for r in result.curve[-10:] if r["mean_prr"] is not None]
        print(json.dumps({"variant": name, "train_prr_last10": round(float(np.mean(last)), 4),
                          "entropy": round(result.curve[-1]["entropy"], 3),
                          "eval": {k: round(v, 4) if isinstance(v, float) else v for k, v in pooled.items()},
                          "seconds": round(time.perf_counter() - t0)}), flush=True)


if __name__ == "__main__":
    main()
