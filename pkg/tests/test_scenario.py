import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from doca.scenario import (BUILTIN_NAMES, ConfigError, ResourcePool, builtin_scenario, from_dict, resolve_scenario,
                           to_dict)


@given(st.integers(1, 40), st.integers(1, 40))
def test_tb_index_is_a_bijection(n_sf, n_sch):
    pool = ResourcePool(n_sf, n_sch)
    seen = set()
    for sf in range(n_sf):
        for sch in range(n_sch):
            tb = pool.tb_index(sf, sch)
            assert 0 <= tb < pool.n_tbs
            assert pool.tb_coords(tb) == (sf, sch)
            seen.add(tb)
    assert seen == set(range(pool.n_tbs))


@given(st.integers(1, 12), st.integers(1, 12), st.data())
def test_hd_conflict_iff_same_subframe(n_sf, n_sch, data):
    pool = ResourcePool(n_sf, n_sch)
    a = data.draw(st.integers(0, pool.n_tbs - 1))
    b = data.draw(st.integers(0, pool.n_tbs - 1))
    assert pool.hd_conflict(a, b) == (pool.tb_coords(a)[0] == pool.tb_coords(b)[0])


@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_builtins_revalidate(name):
    cfg = builtin_scenario(name)
    assert from_dict(to_dict(cfg)) == cfg
    with pytest.raises(Exception):
        cfg.seed = 3  # frozen


def test_table_rows():
    mcd = builtin_scenario("MCD")
    assert (mcd.pool.n_subchannels, mcd.pool.n_subframes, mcd.n_tbs) == (2, 10, 20)
    assert mcd.mobility.n == 30 and mcd.channel.variant == "MCD_SINR"
    assert mcd.speed_mps == pytest.approx(13.8889, abs=1e-4)
    nofade = builtin_scenario("MCD_NOFADE")
    assert nofade.channel.variant == "MCD_RANGE" and nofade.channel.range_m == 120.0
    assert nofade.mobility.policy == "EXP_REINSERT"
    scd2 = builtin_scenario("SCD_II")
    assert (scd2.pool.n_subchannels, scd2.pool.n_subframes, scd2.mobility.n) == (10, 2, 4)
    scd3 = builtin_scenario("SCD_III")
    assert (scd3.mobility.n, scd3.n_tbs) == (5, 20)
    assert builtin_scenario("SCD_I").mobility.n == 10


def test_max_vehicles_for_250m_doca():
    cfg = from_dict({"geometry": {"length": 250.0, "vehicle_length": 5.0}})
    assert cfg.max_vehicles_per_direction == 50
    assert builtin_scenario("MCD").max_vehicles_per_direction == 100


def test_traversal_time_is_36_seconds():
    assert builtin_scenario("SCD_I").traversal_ms == pytest.approx(36_000.0, rel=1e-12)


def test_empty_pool_is_rejected():
    with pytest.raises(ConfigError, match="empty pool") as err:
        from_dict({"pool": {"n_subframes": 0, "n_subchannels": 2}})
    assert err.value.path == "pool.n_subframes"


@pytest.mark.parametrize("data,path", [
    ({"pool": {"n_subframes": 10, "n_subchannels": 2, "colour": 1}}, "pool.colour"),
    ({"bogus": 1}, "bogus"),
    ({"prr_range_bins": [[50, 100], [0, 50]]}, "prr_range_bins[1]"),
    ({"prr_range_bins": [[10, 5]]}, "prr_range_bins[0]"),
    ({"prr_range_bins": []}, "prr_range_bins"),
    ({"channel": {"variant": "FOO"}}, "channel.variant"),
    ({"mobility": {"n": 500}}, "mobility.n"),
    ({"cam_period_ms": 5, "pool": {"n_subframes": 10, "n_subchannels": 2}}, "cam_period_ms"),
    ({"geometry": {"lanes_per_direction": 2}}, "geometry.lanes_per_direction"),
    ({"speed_mps": "fast"}, "speed_mps"),
])
def test_invalid_configs_name_the_field(data, path):
    with pytest.raises(ConfigError) as err:
        from_dict(data)
    assert err.value.path == path


def test_env_overrides_nested_and_top_level():
    env = {"DOCA_POOL__N_SUBFRAMES": "5", "DOCA_SEED": "77", "DOCA_NOT_A_KEY": "1", "HOME": "/x"}
    cfg = builtin_scenario("SCD_I", environ=env)
    assert cfg.pool.n_subframes == 5 and cfg.seed == 77


def test_resolve_accepts_names_and_paths(tmp_path):
    assert resolve_scenario("scd-ii", {}).name == "SCD_II"
    path = tmp_path / "mine.yaml"
    path.write_text("name: mine\npool: {n_subframes: 4, n_subchannels: 3}\n")
    cfg = resolve_scenario(str(path), {})
    assert cfg.name == "mine" and cfg.n_tbs == 12
    with pytest.raises(ConfigError):
        resolve_scenario("NOPE", {})


def test_mean_spatial_gap_of_poisson_headway():
    cfg = builtin_scenario("MCD")
    assert cfg.speed_mps * cfg.headway_mean_s == pytest.approx(34.72, abs=0.005)
    assert math.isclose(cfg.speed_mps, 50 / 3.6)
