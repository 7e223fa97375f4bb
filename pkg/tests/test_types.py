import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vstream import (ClusteringPolicy, ConfigError, InvalidFeatureError,
                     MemoryConfig, PositionTriplet, Tier, feature_map,
                     load_config, scaled_config, token_budget)
from vstream.types import config_as_dict, dump_config


def test_token_budget_reference_configuration():
    cfg = MemoryConfig(n_csm=60, n_dam=30, spatial_size_low=256,
                       spatial_size_high=1024, merger_ratio=4)
    assert token_budget(cfg) == 60 * 64 + 30 * 256 == 11520


def test_token_budget_empty_memory():
    cfg = MemoryConfig(n_csm=0, n_dam=0)
    assert token_budget(cfg) == 0


def test_token_budget_csm_only():
    cfg = MemoryConfig(n_csm=60, n_dam=0, spatial_size_low=256,
                       spatial_size_high=1024, merger_ratio=4)
    assert token_budget(cfg) == 3840


def test_non_divisible_merger_rejected():
    with pytest.raises(ConfigError):
        MemoryConfig(spatial_size_low=250, spatial_size_high=1000,
                     merger_ratio=4)


@given(st.integers(0, 80), st.integers(0, 80), st.integers(0, 20))
def test_token_budget_monotone(n_csm, n_dam, bump):
    n_dam = min(n_dam, n_csm)
    cfg = MemoryConfig(n_csm=n_csm, n_dam=n_dam, budget_limit=10 ** 9)
    bigger = MemoryConfig(n_csm=n_csm + bump, n_dam=n_dam,
                          budget_limit=10 ** 9)
    assert bigger.token_budget() >= cfg.token_budget()
    deeper = MemoryConfig(n_csm=n_csm + bump, n_dam=n_dam + bump,
                          budget_limit=10 ** 9)
    assert deeper.token_budget() >= bigger.token_budget()


def test_default_configuration_within_budget():
    cfg = MemoryConfig()
    assert cfg.token_budget() <= 12000
    assert cfg.token_budget() == 11520
    assert cfg.csm_ratio() == pytest.approx(1 / 3)


def test_capacity_ordering_enforced():
    with pytest.raises(ConfigError):
        MemoryConfig(n_csm=10, n_dam=11, budget_limit=10 ** 9)


def test_pool_relation_enforced():
    with pytest.raises(ConfigError):
        MemoryConfig(spatial_size_low=256, spatial_size_high=512, pool_ratio=4)


def test_budget_limit_enforced():
    with pytest.raises(ConfigError):
        MemoryConfig(n_csm=120, n_dam=60, budget_limit=12000)


def test_grid_shapes():
    cfg = MemoryConfig()
    assert cfg.grid_low == (16, 16)
    assert cfg.grid_high == (32, 32)
    assert cfg.token_grid(16, 16) == (8, 8)
    assert cfg.token_grid(32, 32) == (16, 16)
    assert scaled_config().grid_low == (4, 4)


def test_feature_map_rejects_non_finite():
    bad = np.ones((2, 2, 3), dtype=np.float32)
    bad[0, 0, 0] = np.nan
    with pytest.raises(InvalidFeatureError):
        feature_map(0, bad, Tier.LOW)
    bad[0, 0, 0] = np.inf
    with pytest.raises(InvalidFeatureError):
        feature_map(0, bad, Tier.LOW)


def test_feature_map_shape_and_immutability():
    fm = feature_map(3, np.zeros((2, 2, 4)), Tier.LOW)
    assert fm.spatial_size == 4
    assert not fm.values.flags.writeable
    with pytest.raises(InvalidFeatureError):
        feature_map(-1, np.zeros((2, 2, 4)), Tier.LOW)


def test_position_triplet_invariants():
    t = PositionTriplet(3.5, 0, 0)
    assert t.n_t == 3.5
    with pytest.raises(InvalidFeatureError):
        PositionTriplet(-1.0, 0, 0)


def test_config_file_round_trip(tmp_path):
    cfg = scaled_config(n_csm=6, n_dam=3,
                        clustering_policy=ClusteringPolicy.NEIGHBOR_MERGE)
    path = tmp_path / "memory.cfg"
    dump_config(cfg, path)
    assert load_config(path) == cfg


def test_config_file_rejects_unknown_keys(tmp_path):
    path = tmp_path / "memory.cfg"
    path.write_text("n_csm = 4\nn_dam = 2\nunknown_field = 7\n")
    with pytest.raises(ConfigError, match="unknown_field"):
        load_config(path)


def test_config_file_comments_and_bad_values(tmp_path):
    path = tmp_path / "memory.cfg"
    path.write_text("# comment\nn_csm = 8\n\nn_dam = 4  # inline\n")
    cfg = load_config(path)
    assert (cfg.n_csm, cfg.n_dam) == (8, 4)
    path.write_text("n_csm = eight\n")
    with pytest.raises(ConfigError, match="bad value"):
        load_config(path)


def test_config_as_dict_serializes_enums():
    d = config_as_dict(MemoryConfig())
    assert d["clustering_policy"] == "kmeans"
    assert d["n_csm"] == 60
