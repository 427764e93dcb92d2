import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from doca.mobility import Direction
from doca.scenario import ResourcePool, builtin_scenario
from doca.schedulers import RandomScheduler, attach
from doca.simcore import PrrResult, Simulation
from doca.vrls import (ArchConfig, Bookkeeping, PoolMismatchError, TrainConfig, VrlsScheduler, act, build_networks,
                       build_state, compute_reward, group_permutation, load_policy, policy, retrain, save_policy,
                       shuffle_state, train, unshuffle_probs)
from doca.vrls.train import nstep_returns

pools = st.tuples(st.integers(1, 6), st.integers(1, 5)).map(lambda t: ResourcePool(*t))


def test_state_example():
    book = Bookkeeping(4, 250.0, 50)
    book.record(1, Direction.FORWARD, 13.89, 0)
    book.record(1, Direction.FORWARD, 13.89, 2800)
    s = build_state(book, Direction.FORWARD, 10_000)
    assert s[1, 0] == pytest.approx(0.04)
    assert s[1, 1] == pytest.approx(0.4, abs=1e-4)
    assert not s[[0, 2, 3]].any() and not s[:, 2:].any()
    opp = build_state(book, Direction.BACKWARD, 10_000)
    assert np.array_equal(opp, s[:, [2, 3, 0, 1]])


def test_empty_state_is_zero():
    assert not build_state(Bookkeeping(20, 500.0, 100), Direction.BACKWARD, 1234).any()


def test_counts_expire_with_distance():
    book = Bookkeeping(2, 100.0, 20)
    book.record(0, Direction.FORWARD, 10.0, 0)  # leaves after 10 s
    assert build_state(book, Direction.FORWARD, 10_000)[0, 0] == pytest.approx(0.05)
    assert build_state(book, Direction.FORWARD, 10_000)[0, 1] == pytest.approx(1.0)
    assert not build_state(book, Direction.FORWARD, 10_001).any()


@settings(max_examples=50)
@given(st.lists(st.tuples(st.integers(0, 7), st.sampled_from(list(Direction)), st.floats(1.0, 40.0),
                          st.integers(0, 60_000)), max_size=40), st.integers(0, 120_000))
def test_state_entries_in_unit_interval(records, now):
    book = Bookkeeping(8, 500.0, 100)
    for tb, d, v, t in sorted(records, key=lambda r: r[3]):
        book.record(tb, d, v, t)
    s = build_state(book, Direction.FORWARD, max(now, max((r[3] for r in records), default=0)))
    assert s.shape == (8, 4) and s.min() >= 0.0 and s.max() <= 1.0


def test_fig2_grouping():
    pool = ResourcePool(2, 2)  # rows: r1 = tb0, r3 = tb1 share subframe 0
    seen = {tuple(group_permutation(pool, np.random.default_rng(i))) for i in range(50)}
    assert seen == {(0, 1, 2, 3), (2, 3, 0, 1)}


def test_single_subframe_is_identity():
    pool = ResourcePool(1, 5)
    for i in range(5):
        assert list(group_permutation(pool, np.random.default_rng(i))) == list(range(5))


@given(pools, st.integers(0, 2**32 - 1))
def test_shuffle_groups_by_subframe_and_round_trips(pool, seed):
    rng = np.random.default_rng(seed)
    state = rng.random((pool.n_tbs, 4))
    shuffled, perm = shuffle_state(state, pool, rng)
    assert sorted(perm) == list(range(pool.n_tbs))
    assert np.array_equal(shuffled, state[perm])
    sf = perm.reshape(pool.n_subframes, pool.n_subchannels) // pool.n_subchannels
    assert np.all(sf == sf[:, :1])
    assert np.all(np.diff(perm.reshape(pool.n_subframes, -1), axis=1) == 1)
    probs = rng.random(pool.n_tbs)
    back = unshuffle_probs(probs, perm)
    assert np.array_equal(back[perm], probs)


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_unshuffled_policy_is_a_distribution(seed):
    rng = np.random.default_rng(seed)
    sc = builtin_scenario("SCD_III")
    actor, _ = build_networks(ArchConfig(), sc.n_tbs, seed % 1000)
    shuffled, perm = shuffle_state(rng.random((sc.n_tbs, 4)), sc.pool, rng)
    p = unshuffle_probs(policy(actor, shuffled), perm)
    assert abs(p.sum() - 1.0) < 1e-9 and p.min() >= 0


def test_reward_examples():
    assert compute_reward(PrrResult((1.0,), 1.0), -3.0) == 0.0
    assert compute_reward(PrrResult((0.9, 0.95), 0.9), 0.0) == pytest.approx(-1.0)
    assert compute_reward(PrrResult((None,), None), -0.5) == -0.5


@given(st.floats(0.0, 1.0))
def test_reward_bounds(prr):
    r = compute_reward(PrrResult((prr,), prr), 0.0)
    assert -10.0 <= r <= 0.0


def _uniform_actor(n_tbs):
    actor, _ = build_networks(ArchConfig(), n_tbs, 0)
    actor.set_params({k: np.zeros_like(v) for k, v in actor.params.items()})
    return actor


def test_uniform_logits_give_uniform_actions():
    sc = builtin_scenario("SCD_I")
    actor = _uniform_actor(sc.n_tbs)
    rng = np.random.default_rng(0)
    state = np.zeros((sc.n_tbs, 4))
    # the network is run once per draw, so keep the count moderate
    n = 20_000
    tbs = np.array([act(actor, state, sc.pool, rng, "sample")[0] for _ in range(n)])
    counts = np.bincount(tbs, minlength=sc.n_tbs)
    chi2 = ((counts - n / 20) ** 2 / (n / 20)).sum()
    assert chi2 < 43.8  # 19 dof, 0.999 quantile


def test_greedy_is_permutation_consistent():
    sc = builtin_scenario("SCD_III")
    actor, _ = build_networks(ArchConfig(), sc.n_tbs, 4)
    for seed in range(20):
        rng = np.random.default_rng(seed)
        state = rng.random((sc.n_tbs, 4))
        tb, row, shuffled, perm = act(actor, state, sc.pool, rng, "greedy")
        p = policy(actor, shuffled)
        assert row == int(np.argmax(p)) and tb == perm[row]
        assert np.array_equal(shuffled, state[perm])


def test_greedy_ties_break_to_first_row():
    sc = builtin_scenario("SCD_I")
    actor = _uniform_actor(sc.n_tbs)
    tb, row, _, perm = act(actor, np.zeros((sc.n_tbs, 4)), sc.pool, np.random.default_rng(1), "greedy")
    assert row == 0 and tb == perm[0]


def test_bookkeeping_matches_mobility():
    sc = builtin_scenario("SCD_I")
    sim = Simulation(sc, 17)
    book = Bookkeeping(sc.n_tbs, sc.geometry.length, sc.max_vehicles_per_direction)
    for v in sim.initial_vehicles:
        book.record(v.assigned_tb, v.direction, v.speed, v.entry_time)
    rng = np.random.default_rng(0)
    for _ in range(300):
        d = sim.advance(2**62)
        for direction in Direction:
            truth = sum(1 for vid, (_, dd) in d.snapshot.items() if dd == direction)
            assert book.counts(direction, d.time).sum() == truth
        tb = int(rng.integers(sc.n_tbs))
        sim.assign(tb)
        book.record(tb, d.direction, d.speed, d.time)


def test_scheduler_tracks_initial_population():
    sc = builtin_scenario("SCD_I")
    sim = Simulation(sc, 2)
    sched = VrlsScheduler(sc, _uniform_actor(sc.n_tbs), np.random.default_rng(0))
    attach(sim, sched)
    n = sum(book.sum() for book in (sched.book.counts(d, 0) for d in Direction))
    assert n == len(sim.initial_vehicles)


def test_nstep_returns_by_hand():
    r = np.array([1.0, 2.0, 3.0])
    v = np.array([0.0, 0.0, 0.0, 10.0])
    assert np.allclose(nstep_returns(r, v, 0.5), [4.0, 6.0, 8.0])
    v1 = np.array([0.0, 0.0, 0.0, 10.0])
    assert np.allclose(nstep_returns(r, v1, 0.5, n_step=1), [1.0, 2.0, 8.0])


SMALL = TrainConfig(workers=2, epochs=2, actions_per_epoch=5, seed=3)


def test_sync_training_is_deterministic(tmp_path):
    sc = builtin_scenario("SCD_I")
    for name in ("a", "b"):
        save_policy(tmp_path / f"{name}.ckpt", train(sc, SMALL))
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    pol = load_policy(tmp_path / "a.ckpt")
    assert pol.meta["epoch"] == 2 and pol.n_tbs == 20


def test_training_moves_parameters_and_records_curve():
    sc = builtin_scenario("SCD_II")
    res = train(sc, SMALL)
    assert [r["epoch"] for r in res.curve] == [0, 1]
    assert res.curve[0]["lr"] == 1e-3
    init, _ = build_networks(SMALL.arch, sc.n_tbs, res.init_seed)
    assert any(not np.array_equal(init.params[k], v) for k, v in res.coordinator.actor_params.items())


def test_async_training_smoke():
    res = train(builtin_scenario("SCD_II"), TrainConfig(workers=2, epochs=4, actions_per_epoch=3, sync=False))
    assert res.coordinator.epoch == 4 and len(res.curve) == 4


def test_adam_variant_runs(tmp_path):
    cfg = TrainConfig(workers=1, epochs=2, actions_per_epoch=3, optimizer="adam", momentum=0.9,
                      normalize_advantages=True)
    res = train(builtin_scenario("SCD_II"), cfg)
    save_policy(tmp_path / "p.ckpt", res)
    pol = load_policy(tmp_path / "p.ckpt")
    assert pol.meta["opt_steps"] == [2, 2]
    res2 = retrain(pol, builtin_scenario("SCD_II"), cfg, resume=True)
    assert res2.coordinator.opt_actor.steps == 4 and res2.coordinator.epoch == 4


def test_retrain_zero_epochs_keeps_parameters(tmp_path):
    sc = builtin_scenario("SCD_I")
    save_policy(tmp_path / "p.ckpt", train(sc, SMALL))
    pol = load_policy(tmp_path / "p.ckpt")
    res = retrain(pol, builtin_scenario("SCD_III"), TrainConfig(workers=1, epochs=0))
    assert all(np.array_equal(pol.actor_params[k], v) for k, v in res.coordinator.actor_params.items())
    assert res.coordinator.epoch == 0
    resumed = retrain(pol, sc, TrainConfig(workers=1, epochs=0), resume=True)
    assert resumed.coordinator.epoch == 2


def test_retrain_rejects_other_pool_size(tmp_path):
    sc = builtin_scenario("SCD_I")
    save_policy(tmp_path / "p.ckpt", train(sc, TrainConfig(workers=1, epochs=0)))
    small = sc.replace(pool=ResourcePool(4, 2))
    with pytest.raises(PoolMismatchError):
        retrain(load_policy(tmp_path / "p.ckpt"), small, TrainConfig(workers=1, epochs=1))


def test_scheduler_rejects_other_pool_size():
    sc = builtin_scenario("SCD_I")
    actor, _ = build_networks(ArchConfig(), 8, 0)
    with pytest.raises(ValueError):
        VrlsScheduler(sc, actor, np.random.default_rng(0))
