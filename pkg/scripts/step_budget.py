"""How far can a weight move under the step-size schedule?

With RMSProp the per-step change of a weight is roughly lr(ep) in magnitude, so
the sum of the schedule bounds the typical total drift. Compare it with the
input scale of one vehicle in the count columns of the state.
"""
import argparse

from doca.nnkit import learning_rate
from doca.scenario import builtin_scenario


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--epochs", type=int, nargs="+", default=[100, 500, 1000, 5000])
    p.add_argument("--scenario", default="SCD_I")
    args = p.parse_args()
    sc = builtin_scenario(args.scenario)
    print(f"{sc.name}: one vehicle adds 1/{sc.max_vehicles_per_direction} = "
          f"{1 / sc.max_vehicles_per_direction:.3g} to a count entry")
    for n in args.epochs:
        total = sum(learning_rate(e) for e in range(n))
        print(f"{n:6d} updates: sum of step sizes {total:.4f}")


if __name__ == "__main__":
    main()
