import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from doca.scenario import ResourcePool, builtin_scenario
from doca.schedulers import (Mode4Scheduler, OracleCapacityError, OracleScheduler, RandomScheduler, analytic_prr,
                             attach, brute_force_assign, mode4_select)
from doca.simcore import Simulation


def _chi2(counts, expected):
    return float(((counts - expected) ** 2 / expected).sum())


def test_random_is_uniform():
    sc = builtin_scenario("SCD_I")
    sched = RandomScheduler(sc.pool, np.random.default_rng(0))
    draws = np.array([sched.on_vehicle_entered(None) for _ in range(100_000)])
    counts = np.bincount(draws, minlength=20)
    # 19 degrees of freedom, 0.999 quantile is 43.8
    assert _chi2(counts, 5000.0) < 43.8


def test_mode4_without_history_is_uniform():
    rng = np.random.default_rng(1)
    draws = np.array([mode4_select(None, rng, 0.2, 20) for _ in range(40_000)])
    assert _chi2(np.bincount(draws, minlength=20), 2000.0) < 43.8


def test_mode4_avoids_occupied_tb():
    rng = np.random.default_rng(2)
    energy = np.zeros(20)
    energy[7] = 1e-9
    picks = {mode4_select(energy, rng, 0.2) for _ in range(2000)}
    assert 7 not in picks
    # the candidate set is the four lowest; all zero-energy TBs are tied and chosen at random
    assert len(picks) == 19


def test_mode4_candidates_are_lowest_fraction():
    rng = np.random.default_rng(3)
    energy = np.arange(10, dtype=float)[::-1]
    picks = {mode4_select(energy, rng, 0.2) for _ in range(500)}
    assert picks == {8, 9}


def test_mode4_counter_reselects():
    sc = builtin_scenario("MCD_NOFADE")
    sim = Simulation(sc, 5)
    sched = Mode4Scheduler(sc, np.random.default_rng(5))
    attach(sim, sched)
    sim.run(sched, 5_000)
    # counters between 5 and 15 periods, so every vehicle reselects at least once in 5 s
    assert sched.reselections >= len(sim.initial_vehicles)
    assert np.all(sched.counter[list(sim.traffic.vehicles)] >= 1)


def test_mode4_senses_only_after_hearing():
    sc = builtin_scenario("SCD_I")
    sched = Mode4Scheduler(sc, np.random.default_rng(0))
    assert sched.sensed(0) is None


def _snap(tbs):
    from doca.simcore import Decision
    from doca.mobility import Direction
    from doca.simcore import PrrResult
    return Decision(len(tbs), Direction.FORWARD, 13.9, 0, PrrResult((), None),
                    {i: (tb, Direction.FORWARD) for i, tb in enumerate(tbs)})


def test_oracle_fills_free_subframe():
    sc = builtin_scenario("SCD_I")
    tb = OracleScheduler(sc).on_vehicle_entered(_snap([0, 2, 4, 6, 8, 10, 12, 14, 16]))
    assert tb // 2 == 9
    assert analytic_prr([0, 2, 4, 6, 8, 10, 12, 14, 16, tb], sc.pool) == 1.0


def test_oracle_scd_ii_splits_two_and_two():
    sc = builtin_scenario("SCD_II")
    tb = OracleScheduler(sc).on_vehicle_entered(_snap([0, 1, 10]))
    assert sc.pool.subframe_of(tb) == 1 and tb != 10
    assert analytic_prr([0, 1, 10, tb], sc.pool) == pytest.approx(2 / 3)


def test_oracle_two_vehicles_perfect():
    sc = builtin_scenario("SCD_II")
    tb = OracleScheduler(sc).on_vehicle_entered(_snap([3]))
    assert analytic_prr([3, tb], sc.pool) == 1.0


def test_oracle_requires_scd():
    with pytest.raises(ValueError):
        OracleScheduler(builtin_scenario("MCD"))


def test_oracle_cap():
    pool = ResourcePool(2, 2)
    with pytest.raises(OracleCapacityError):
        brute_force_assign({i: 0 for i in range(10)}, [10], pool, cap=10)


@settings(max_examples=40)
@given(st.lists(st.integers(0, 5), max_size=4), st.integers(1, 2))
def test_oracle_matches_exhaustive_search(fixed, n_new):
    pool = ResourcePool(3, 2)
    got = brute_force_assign(dict(enumerate(fixed)), list(range(len(fixed), len(fixed) + n_new)), pool)

    def value(tbs):
        v = analytic_prr(tbs, pool)
        return 1.0 if v is None else v

    best = max(value(fixed + list(c)) for c in itertools.product(range(pool.n_tbs), repeat=n_new))
    assert value(fixed + list(got.values())) == pytest.approx(best, abs=1e-12)


@settings(max_examples=20)
@given(st.lists(st.integers(0, 19), min_size=1, max_size=8))
def test_oracle_never_below_random(fixed):
    sc = builtin_scenario("SCD_I")
    tb = OracleScheduler(sc).on_vehicle_entered(_snap(fixed))
    oracle = analytic_prr(fixed + [tb], sc.pool)
    mean_random = np.mean([analytic_prr(fixed + [r], sc.pool) for r in range(sc.n_tbs)])
    assert oracle >= mean_random - 1e-12


def test_oracle_keeps_scd_i_perfect_in_simulation():
    sc = builtin_scenario("SCD_I")
    sim = Simulation(sc, 8, initial_tb=lambda v: 2 * v.id)
    sched = OracleScheduler(sc)
    sim.run(sched, 200_000)
    assert all(w.prr.min == 1.0 for w in sim.finish() if w.prr.min is not None)
