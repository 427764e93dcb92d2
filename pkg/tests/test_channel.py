import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from doca.channel import (NOT_A_RECEIVER, Channel, Result, ShadowingField, calibrate_threshold, pathloss_db,
                          resolve_subframe, sample_shadowing, winner_b1_los_db)
from doca.scenario import ChannelConfig


def _chan(variant="SCD", **kw):
    cfg = ChannelConfig(variant=variant, **kw)
    return Channel(cfg, 40, np.random.default_rng(0))


def _line(n):
    """Vehicles on a line 10 m apart."""
    return lambda a, b: abs(a - b) * 10.0


def test_scd_distinct_subchannels_hd_only():
    out = resolve_subframe([(0, 4), (1, 5)], list(range(2, 10)), _line(10), _chan(), n_subchannels=2)
    for o in out:
        assert o.count(Result.SUCCESS) == 8
        assert o.count(Result.HD_LOSS) == 1
        assert o.tx_vehicle not in o.receivers.tolist()


def test_scd_same_tb_collides_completely():
    out = resolve_subframe([(0, 4), (1, 4)], list(range(2, 10)), _line(10), _chan())
    for o in out:
        assert o.count(Result.SUCCESS) == 0
        assert o.count(Result.COLLISION_LOSS) == 8 and o.count(Result.HD_LOSS) == 1


def test_mixed_subframes_rejected():
    with pytest.raises(ValueError):
        resolve_subframe([(0, 0), (1, 2)], [2], _line(3), _chan(), n_subchannels=2)


def test_range_disc_boundary():
    ch = _chan("MCD_RANGE", range_m=120.0)
    d = {(0, 1): 130.0, (0, 2): 120.0, (0, 3): 50.0}
    dist = lambda a, b: d.get((min(a, b), max(a, b)), 1000.0)
    (o,) = resolve_subframe([(0, 0)], [1, 2, 3], dist, ch)
    res = dict(zip(o.receivers.tolist(), o.results.tolist()))
    assert res == {1: Result.OUT_OF_RANGE, 2: Result.SUCCESS, 3: Result.SUCCESS}


def test_range_collision_needs_interferer_in_range():
    ch = _chan("MCD_RANGE", range_m=120.0)
    pos = {0: 0.0, 1: 300.0, 2: 50.0, 3: 250.0}
    dist = lambda a, b: abs(pos[a] - pos[b])
    out = {o.tx_vehicle: dict(zip(o.receivers.tolist(), o.results.tolist()))
           for o in resolve_subframe([(0, 3), (1, 3)], [2, 3], dist, ch)}
    # 2 hears 0 (50 m) and 1 is 250 m away from it: no collision
    assert out[0][2] == Result.SUCCESS
    assert out[1][3] == Result.SUCCESS
    pos[1] = 100.0  # now 1 is within range of receiver 2
    out = {o.tx_vehicle: dict(zip(o.receivers.tolist(), o.results.tolist()))
           for o in resolve_subframe([(0, 3), (1, 3)], [2], dist, ch)}
    assert out[0][2] == Result.COLLISION_LOSS


scene = st.integers(2, 8).flatmap(lambda n: st.tuples(
    st.just(n),
    st.lists(st.floats(0, 500), min_size=n, max_size=n),
    st.lists(st.integers(0, 3), min_size=n, max_size=n),  # TB per vehicle, one subframe of 4 subchannels
    st.lists(st.booleans(), min_size=n, max_size=n),
))


@given(scene)
def test_scd_is_limit_of_range_model(args):
    n, pos, tbs, sends = args
    tx = [(i, tbs[i]) for i in range(n) if sends[i]]
    if not tx:
        return
    dist = lambda a, b: math.hypot(pos[a] - pos[b], 4.0)
    a = resolve_subframe(tx, list(range(n)), dist, _chan("SCD"))
    b = resolve_subframe(tx, list(range(n)), dist, _chan("MCD_RANGE", range_m=math.hypot(500, 4) + 1))
    for x, y in zip(a, b):
        assert x.results.tolist() == y.results.tolist()


@given(scene, st.sampled_from(["SCD", "MCD_RANGE", "MCD_SINR"]))
def test_hd_rule_holds_for_every_variant(args, variant):
    n, pos, tbs, sends = args
    tx = [(i, tbs[i]) for i in range(n) if sends[i]]
    if not tx:
        return
    ch = _chan(variant, tx_power_dbm=-5.0)
    out = resolve_subframe(tx, list(range(n)), lambda a, b: abs(pos[a] - pos[b]) + 4.0, ch)
    senders = {v for v, _ in tx}
    for o in out:
        for r, res in zip(o.receivers.tolist(), o.results.tolist()):
            if r in senders:
                assert res == Result.HD_LOSS
            else:
                assert res != Result.HD_LOSS


def test_resolve_marks_transmitter_column():
    ch = _chan()
    res = ch.resolve(np.array([1]), np.array([0]), np.array([0]), np.array([0, 1, 2]), np.zeros((1, 3)))
    assert res[0, 1] == NOT_A_RECEIVER


def test_pathloss_clamp_and_monotone():
    cfg = ChannelConfig()
    assert pathloss_db(1.0, cfg) == pathloss_db(3.0, cfg)
    d = np.linspace(0.1, 1000, 2000)
    assert np.all(np.diff(pathloss_db(d, cfg)) >= 0)
    assert pathloss_db(100.0, cfg) >= pathloss_db(50.0, cfg)


def test_log_distance_fallback_continuous_at_clamp():
    cfg = ChannelConfig(pathloss="log_distance", pathloss_exponent=3.0)
    at3 = pathloss_db(3.0, cfg)
    assert pathloss_db(3.0 + 1e-9, cfg) == pytest.approx(at3, abs=1e-6)
    assert pathloss_db(30.0, cfg) == pytest.approx(at3 + 30.0, abs=1e-9)


def test_winner_b1_reference_values():
    # breakpoint 4*(0.5 m)^2*6 GHz/c = 20 m; independent evaluation of both branches
    near = 22.7 * math.log10(10) + 41 + 20 * math.log10(6 / 5)
    far = 40 * math.log10(100) + 9.45 - 34.6 * math.log10(0.5) + 2.7 * math.log10(6 / 5)
    assert winner_b1_los_db(10.0) == pytest.approx(near, abs=1e-9)
    assert winner_b1_los_db(100.0) == pytest.approx(far, abs=1e-9)


def test_calibrated_range_is_median_range():
    cfg = ChannelConfig(variant="MCD_SINR", tx_power_dbm=-5.0, shadow_sigma_db=0.0)
    ch = Channel(cfg, 3, np.random.default_rng(0))
    assert ch.threshold_db == pytest.approx(calibrate_threshold(cfg))
    d = np.array([[0.0, 119.0, 121.0]])
    res = ch.resolve(np.array([0]), np.array([0]), np.array([0]), np.array([0, 1, 2]), d)
    assert res[0].tolist() == [NOT_A_RECEIVER, Result.SUCCESS, Result.SINR_LOSS]


def test_shadowing_zero_step_keeps_value_and_symmetry():
    f = ShadowingField(4, 3.0, 25.0)
    rng = np.random.default_rng(1)
    v = sample_shadowing(f, (0, 2), 40.0, rng)
    assert f.get(2, 0) == f.get(0, 2) == v
    assert sample_shadowing(f, (2, 0), 40.0, rng) == v


def test_shadowing_far_jump_is_fresh():
    f = ShadowingField(2, 3.0, 25.0)
    rng = np.random.default_rng(2)
    draws = []
    for k in range(4000):
        sample_shadowing(f, (0, 1), 0.0, rng)
        draws.append(sample_shadowing(f, (0, 1), 1e6 * (k % 2 + 1), rng))
    assert abs(np.corrcoef(draws[:-1], draws[1:])[0, 1]) < 0.06


def test_shadowing_stationary_variance():
    f = ShadowingField(2, 3.0, 25.0)
    rng = np.random.default_rng(3)
    n = 100_000
    seps = 100.0 + np.cumsum(rng.uniform(0.0, 5.0, n))
    vals = np.empty(n)
    for i in range(n):
        vals[i] = f.update(np.array([0]), np.array([1]), np.array([seps[i]]), rng)[0]
    # autocorrelated samples: widen the 3-sigma band by the effective sample size
    rho = np.exp(-2.5 / 25.0)
    n_eff = n * (1 - rho * rho) / (1 + rho * rho)
    band = 3 * 9.0 * math.sqrt(2 / n_eff)
    assert abs(vals.var() - 9.0) < band
