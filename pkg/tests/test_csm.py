import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vstream import (InvalidStateError, MemoryConfig, TierMismatchError,
                     csm_init, csm_positions, csm_update, scaled_config,
                     state_fingerprint, states_equal)
from vstream.csm import (ClusterState, add_singleton, csm_update_detail,
                         empty_state, load_state, save_state, weighted_lloyd)

from .conftest import mk_high, mk_low
from .oracles import brute_force_weighted_lloyd, replay_members


def vec_config(n_csm, dim, max_iters=10):
    return MemoryConfig(n_csm=n_csm, n_dam=0, spatial_size_low=1,
                        spatial_size_high=4, dim=dim, merger_ratio=1,
                        pool_ratio=4, kmeans_max_iters=max_iters,
                        budget_limit=10 ** 9)


def state_from(vectors, weights, psums) -> ClusterState:
    vectors = np.asarray(vectors, dtype=np.float64)
    state = empty_state(1, 1, vectors.shape[1])
    from vstream.csm import _as_state_arrays
    c, w, p, m = _as_state_arrays(vectors, weights, psums, weights)
    return ClusterState(1, 1, vectors.shape[1], c, w, p, m)


# -- initialization ----------------------------------------------------------

def test_init_singletons():
    cfg = MemoryConfig(n_csm=60, n_dam=0, spatial_size_low=1,
                       spatial_size_high=4, merger_ratio=1, dim=3,
                       budget_limit=10 ** 9)
    frames = [mk_low(0, [0.0, 0, 0]), mk_low(1, [1.0, 1, 1])]
    state = csm_init(frames, cfg)
    assert state.count == 2
    assert state.weights.tolist() == [1, 1]
    assert csm_positions(state).tolist() == [0.0, 1.0]


def test_init_empty():
    state = csm_init([], scaled_config())
    assert state.count == 0
    assert state.total_weight == 0


def test_init_full_capacity(rng):
    cfg = vec_config(n_csm=60, dim=4)
    frames = [mk_low(i, rng.normal(size=4)) for i in range(60)]
    state = csm_init(frames, cfg)
    assert state.count == 60
    assert all(w == 1 for w in state.weights)


def test_init_rejects_high_tier():
    with pytest.raises(TierMismatchError):
        csm_init([mk_high(0, np.zeros((1, 1, 8)))], scaled_config())


def test_init_rejects_overflow(rng):
    cfg = vec_config(n_csm=2, dim=4)
    frames = [mk_low(i, rng.normal(size=4)) for i in range(3)]
    with pytest.raises(InvalidStateError):
        csm_init(frames, cfg)


# -- update ------------------------------------------------------------------

def test_update_exact_coincidence_merges():
    cfg = vec_config(n_csm=2, dim=3)
    state = csm_init([mk_low(0, [0.0, 0, 0]), mk_low(1, [1.0, 1, 1])], cfg)
    new = mk_low(2, [0.0, 0, 0])
    out = csm_update(state, new, cfg)
    assert out.count == 2
    order = np.argsort(out.weights)[::-1]
    assert out.weights[order].tolist() == [2, 1]
    heavy, light = order[0], order[1]
    assert np.allclose(out.centroids[heavy], 0.0)
    assert np.allclose(out.centroids[light], 1.0)
    positions = csm_positions(out)
    assert positions[heavy] == pytest.approx(1.0)   # members {0, 2}
    assert positions[light] == pytest.approx(1.0)   # member {1}
    assert out.total_weight == 3


def test_update_requires_full_state():
    cfg = vec_config(n_csm=4, dim=3)
    state = csm_init([mk_low(0, [0.0, 0, 0])], cfg)
    with pytest.raises(InvalidStateError):
        csm_update(state, mk_low(1, [1.0, 1, 1]), cfg)


def test_update_matches_brute_force_oracle_single_instance(rng):
    points = rng.normal(size=(64, 4))
    weights = rng.integers(1, 9, size=63).tolist() + [1]
    psums = rng.integers(0, 100, size=63).tolist() + [77]
    for max_iters in (1, 10):
        expected = brute_force_weighted_lloyd(points, weights, psums,
                                              points[:63], max_iters)
        got = weighted_lloyd(points, weights, psums, points[:63], max_iters)
        assert np.array_equal(got.assignment, expected[3])
        assert np.array_equal(got.weights, expected[1])
        assert np.array_equal(got.position_sums, expected[2])
        np.testing.assert_allclose(got.centroids, expected[0], atol=1e-12,
                                   rtol=0)


def test_streaming_reference_capacity(rng):
    cfg = vec_config(n_csm=60, dim=4, max_iters=10)
    state = empty_state(1, 1, 4)
    for t in range(120):
        frame = mk_low(t, rng.normal(size=4))
        if state.count < cfg.n_csm:
            state = add_singleton(state, frame)
        else:
            state = csm_update(state, frame, cfg)
    assert state.count == 60
    assert state.total_weight == 120


# -- temporal positions -------------------------------------------------------

def test_positions_mean_of_members():
    state = state_from([[0.0], [1.0]], weights=[2, 1], psums=[6, 7])
    assert csm_positions(state).tolist() == [3.0, 7.0]


def test_positions_merged_weighted_mean():
    # Independent member enumeration: a cluster holding {1, 2} (mean 1.5,
    # weight 2) merged with {5} has mean (1 + 2 + 5) / 3 = 8/3.
    members_a, members_b = [1, 2], [5]
    expected = sum(members_a + members_b) / 3
    assert expected == pytest.approx(8 / 3)
    state = state_from([[0.0]], weights=[3],
                       psums=[sum(members_a) + sum(members_b)])
    assert csm_positions(state)[0] == pytest.approx(expected)


def test_positions_empty_state_rejected():
    with pytest.raises(InvalidStateError):
        csm_positions(empty_state(1, 1, 4))


@given(st.integers(0, 2 ** 32 - 1), st.integers(8, 40))
def test_positions_bounded_by_stream_length(seed, steps):
    rng = np.random.Generator(np.random.Philox(key=seed))
    cfg = vec_config(n_csm=6, dim=3, max_iters=4)
    state = empty_state(1, 1, 3)
    for t in range(steps):
        frame = mk_low(t, rng.normal(size=3))
        state = (add_singleton(state, frame) if state.count < cfg.n_csm
                 else csm_update(state, frame, cfg))
    positions = csm_positions(state)
    assert np.all(positions >= 0)
    assert np.all(positions <= steps - 1)
    assert state.total_weight == steps


# -- invariants ---------------------------------------------------------------

def test_weight_conservation_is_exact(rng):
    cfg = vec_config(n_csm=8, dim=4, max_iters=6)
    state = empty_state(1, 1, 4)
    for t in range(200):
        frame = mk_low(t, rng.normal(size=4) * (1 + t % 3))
        state = (add_singleton(state, frame) if state.count < cfg.n_csm
                 else csm_update(state, frame, cfg))
        assert state.total_weight == t + 1
        assert state.count == min(t + 1, 8)
        assert np.array_equal(state.weights, state.member_counts)


def test_centroid_fidelity_against_member_replay(rng):
    cfg = vec_config(n_csm=6, dim=5, max_iters=8)
    state = empty_state(1, 1, 5)
    frames = []
    assignments = []
    for t in range(300):
        frame = mk_low(t, rng.normal(size=5) + (t % 4))
        frames.append(frame.flat())
        if state.count < cfg.n_csm:
            state = add_singleton(state, frame)
        else:
            state, detail = csm_update_detail(state, frame, cfg)
            assignments.append((t, detail.assignment))
    members = replay_members(cfg.n_csm, assignments)
    data = np.stack(frames)
    for k in range(cfg.n_csm):
        assert len(members[k]) == state.member_counts[k]
        expected = data[members[k]].mean(axis=0)
        np.testing.assert_allclose(state.centroids[k], expected, rtol=1e-9)
        assert state.position_sums[k] == sum(members[k])


def test_determinism_bit_identical(rng):
    cfg = vec_config(n_csm=8, dim=4)
    frames = [mk_low(t, rng.normal(size=4)) for t in range(100)]

    def run():
        state = empty_state(1, 1, 4)
        for f in frames:
            state = (add_singleton(state, f) if state.count < cfg.n_csm
                     else csm_update(state, f, cfg))
        return state

    a, b = run(), run()
    assert states_equal(a, b)
    assert state_fingerprint(a) == state_fingerprint(b)


def test_degenerate_identical_stream_never_errors():
    cfg = vec_config(n_csm=4, dim=3, max_iters=10)

    def run():
        state = empty_state(1, 1, 3)
        for t in range(40):
            frame = mk_low(t, [2.0, 2.0, 2.0])
            state = (add_singleton(state, frame) if state.count < cfg.n_csm
                     else csm_update(state, frame, cfg))
        return state

    a, b = run(), run()
    assert a.count == 4
    assert a.total_weight == 40
    assert np.all(a.weights >= 1)
    assert states_equal(a, b)


def test_update_rejects_high_tier_and_shape_mismatch(rng):
    cfg = vec_config(n_csm=2, dim=3)
    state = csm_init([mk_low(0, [0.0, 0, 0]), mk_low(1, [1.0, 1, 1])], cfg)
    with pytest.raises(TierMismatchError):
        csm_update(state, mk_high(2, np.zeros((1, 1, 3))), cfg)


def test_checkpoint_round_trip(tmp_path, rng):
    cfg = vec_config(n_csm=5, dim=4)
    state = empty_state(1, 1, 4)
    for t in range(20):
        frame = mk_low(t, rng.normal(size=4))
        state = (add_singleton(state, frame) if state.count < cfg.n_csm
                 else csm_update(state, frame, cfg))
    save_state(state, tmp_path / "ckpt")
    loaded = load_state(tmp_path / "ckpt")
    assert loaded.count == state.count
    assert np.array_equal(loaded.weights, state.weights)
    assert np.array_equal(loaded.position_sums, state.position_sums)
    # Checkpoint storage is float32; agreement is at storage precision.
    np.testing.assert_allclose(loaded.centroids, state.centroids, rtol=1e-6)
