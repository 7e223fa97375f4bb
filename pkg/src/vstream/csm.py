"""Context synopsis memory: fixed-capacity weighted cluster centroids.

The memory compresses the low-resolution stream into ``n_csm`` weighted
centroids. Each arriving frame triggers one weighted Lloyd pass over the
``n_csm + 1`` points {existing centroids..., new frame} with weights
{cluster sizes..., 1}, warm-started from the existing centroids, so the per
step cost depends only on the capacity, never on the stream length.

Tie rules (shared with the test oracles): nearest-centroid assignment ties
go to the lowest cluster index; empty-cluster repair moves the point farthest
from its assigned centroid, ties to the lowest point index.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidFeatureError, InvalidStateError, TierMismatchError
from .types import FeatureMap, MemoryConfig, Tier


@dataclass(frozen=True, eq=False)
class ClusterState:
    """Weighted centroids plus the accumulators needed for temporal positions.

    ``centroids`` is float64 with shape ``(k, grid_h * grid_w * dim)``;
    weights, position sums, and member counts are exact int64 so that weight
    conservation holds bit-for-bit. Instances are immutable; updates return
    new states.
    """

    grid_h: int
    grid_w: int
    dim: int
    centroids: np.ndarray
    weights: np.ndarray
    position_sums: np.ndarray
    member_counts: np.ndarray

    def __post_init__(self):
        for name in ("centroids", "weights", "position_sums", "member_counts"):
            arr = getattr(self, name)
            arr.flags.writeable = False

    @property
    def count(self) -> int:
        return self.centroids.shape[0]

    @property
    def flat_len(self) -> int:
        return self.grid_h * self.grid_w * self.dim

    @property
    def total_weight(self) -> int:
        return int(self.weights.sum())

    def centroid_grid(self, k: int) -> np.ndarray:
        return self.centroids[k].reshape(self.grid_h, self.grid_w, self.dim)

    def positions(self) -> np.ndarray:
        return self.position_sums / self.weights


@dataclass(frozen=True, eq=False)
class UpdateDetail:
    """Per-update bookkeeping consumed by replay/fidelity checks."""

    assignment: np.ndarray   # maps the k+1 input points to cluster slots
    iterations: int


@dataclass(frozen=True, eq=False)
class LloydResult:
    centroids: np.ndarray
    weights: np.ndarray
    position_sums: np.ndarray
    member_counts: np.ndarray
    assignment: np.ndarray
    iterations: int


def _as_state_arrays(centroids, weights, psums, counts):
    return (np.ascontiguousarray(centroids, dtype=np.float64),
            np.ascontiguousarray(weights, dtype=np.int64),
            np.ascontiguousarray(psums, dtype=np.int64),
            np.ascontiguousarray(counts, dtype=np.int64))


def empty_state(grid_h: int, grid_w: int, dim: int) -> ClusterState:
    flat = grid_h * grid_w * dim
    c, w, p, m = _as_state_arrays(np.empty((0, flat)), np.empty(0, np.int64),
                                  np.empty(0, np.int64), np.empty(0, np.int64))
    return ClusterState(grid_h, grid_w, dim, c, w, p, m)


def _check_low(feature: FeatureMap):
    if feature.tier is not Tier.LOW:
        raise TierMismatchError(
            f"synopsis memory consumes low-resolution maps, got {feature.tier}"
        )


def add_singleton(state: ClusterState, feature: FeatureMap) -> ClusterState:
    """Append one frame as its own cluster (warm-up phase)."""
    _check_low(feature)
    if state.count and (feature.grid_h, feature.grid_w, feature.dim) != (
            state.grid_h, state.grid_w, state.dim):
        raise InvalidStateError("feature grid does not match cluster state")
    grid = (feature.grid_h, feature.grid_w, feature.dim)
    centroids = np.concatenate([state.centroids.reshape(-1, feature.spatial_size * feature.dim)
                                if state.count else
                                np.empty((0, feature.spatial_size * feature.dim)),
                                feature.flat()[None, :]])
    weights = np.append(state.weights, 1)
    psums = np.append(state.position_sums, feature.frame_index)
    counts = np.append(state.member_counts, 1)
    c, w, p, m = _as_state_arrays(centroids, weights, psums, counts)
    return ClusterState(*grid, c, w, p, m)


def csm_init(first_features, config: MemoryConfig) -> ClusterState:
    """Seed the memory with one singleton cluster per warm-up frame."""
    features = list(first_features)
    if len(features) > config.n_csm:
        raise InvalidStateError(
            f"warm-up holds at most n_csm={config.n_csm} frames, "
            f"got {len(features)}"
        )
    if not features:
        h, w = config.grid_low
        return empty_state(h, w, config.dim)
    state = empty_state(features[0].grid_h, features[0].grid_w, features[0].dim)
    for f in features:
        state = add_singleton(state, f)
    return state


def weighted_lloyd(points, weights, position_sums, init_centroids,
                   max_iters: int) -> LloydResult:
    """Weighted Lloyd iteration of m points into k <= m clusters.

    Stops early when the assignment repeats. Weights and position sums are
    merged with exact integer arithmetic; only centroids are floating point.
    """
    points = np.asarray(points, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.int64)
    psums = np.asarray(position_sums, dtype=np.int64)
    centroids = np.array(init_centroids, dtype=np.float64)
    m, k = points.shape[0], centroids.shape[0]
    if m < k:
        raise InvalidStateError(f"need at least {k} points, got {m}")

    point_sq = np.square(points).sum(axis=1)
    out_w = out_p = out_m = None
    prev = None
    iterations = 0
    for it in range(1, max_iters + 1):
        d2 = (point_sq[:, None] - 2.0 * (points @ centroids.T)
              + np.square(centroids).sum(axis=1)[None, :])
        assign = np.argmin(d2, axis=1)
        counts = np.bincount(assign, minlength=k)
        if np.any(counts == 0):
            # Direct distances here: repair ties must resolve exactly (the
            # expanded form above leaves ~1e-15 residuals on exact ties).
            to_centroid = np.square(points - centroids[assign]).sum(axis=1)
            for j in np.flatnonzero(counts == 0):
                eligible = np.flatnonzero(counts[assign] >= 2)
                move = eligible[np.argmax(to_centroid[eligible])]
                counts[assign[move]] -= 1
                assign[move] = j
                counts[j] = 1
        if prev is not None and np.array_equal(assign, prev):
            break
        prev = assign
        iterations = it
        onehot = np.zeros((k, m), dtype=np.float64)
        onehot[assign, np.arange(m)] = weights
        totals = onehot.sum(axis=1)
        centroids = (onehot @ points) / totals[:, None]
        out_w = np.zeros(k, dtype=np.int64)
        out_p = np.zeros(k, dtype=np.int64)
        out_m = np.zeros(k, dtype=np.int64)
        np.add.at(out_w, assign, weights)
        np.add.at(out_p, assign, psums)
        np.add.at(out_m, assign, 1)
    return LloydResult(centroids, out_w, out_p, out_m, prev, iterations)


def csm_update_detail(state: ClusterState, new_feature: FeatureMap,
                      config: MemoryConfig) -> tuple[ClusterState, UpdateDetail]:
    """One consolidation step; also returns the point-to-slot assignment."""
    _check_low(new_feature)
    if state.count != config.n_csm:
        raise InvalidStateError(
            f"update requires a full memory of {config.n_csm} clusters, "
            f"state has {state.count}"
        )
    if (new_feature.grid_h, new_feature.grid_w, new_feature.dim) != (
            state.grid_h, state.grid_w, state.dim):
        raise InvalidFeatureError("feature grid does not match cluster state")
    points = np.concatenate([state.centroids, new_feature.flat()[None, :]])
    weights = np.append(state.weights, 1)
    psums = np.append(state.position_sums, new_feature.frame_index)
    result = weighted_lloyd(points, weights, psums, state.centroids,
                            config.kmeans_max_iters)
    member_counts = np.zeros(config.n_csm, dtype=np.int64)
    np.add.at(member_counts, result.assignment,
              np.append(state.member_counts, 1))
    c, w, p, m = _as_state_arrays(result.centroids, result.weights,
                                  result.position_sums, member_counts)
    new_state = ClusterState(state.grid_h, state.grid_w, state.dim, c, w, p, m)
    return new_state, UpdateDetail(result.assignment, result.iterations)


def csm_update(state: ClusterState, new_feature: FeatureMap,
               config: MemoryConfig) -> ClusterState:
    return csm_update_detail(state, new_feature, config)[0]


def csm_positions(state: ClusterState) -> np.ndarray:
    """Mean member frame index per cluster (the temporal sort key)."""
    if state.count == 0:
        raise InvalidStateError("positions of an empty state are undefined")
    return state.positions()


def state_fingerprint(state: ClusterState) -> str:
    """Order-sensitive content hash used by replay-equivalence checks."""
    digest = hashlib.sha256()
    digest.update(np.int64([state.grid_h, state.grid_w, state.dim,
                            state.count]).tobytes())
    digest.update(state.centroids.tobytes())
    digest.update(state.weights.tobytes())
    digest.update(state.position_sums.tobytes())
    digest.update(state.member_counts.tobytes())
    return digest.hexdigest()


def states_equal(a: ClusterState, b: ClusterState) -> bool:
    return (a.grid_h, a.grid_w, a.dim) == (b.grid_h, b.grid_w, b.dim) and \
        a.centroids.tobytes() == b.centroids.tobytes() and \
        np.array_equal(a.weights, b.weights) and \
        np.array_equal(a.position_sums, b.position_sums) and \
        np.array_equal(a.member_counts, b.member_counts)


def save_state(state: ClusterState, directory) -> None:
    """Checkpoint the state (centroids at storage precision, float32)."""
    from .bank import write_records

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_records(directory / "centroids.fvsb", Tier.LOW, state.grid_h,
                  state.grid_w, state.dim,
                  state.centroids.astype(np.float32))
    meta = {
        "weights": state.weights.tolist(),
        "position_sums": state.position_sums.tolist(),
        "member_counts": state.member_counts.tolist(),
    }
    (directory / "state.json").write_text(json.dumps(meta))


def load_state(directory) -> ClusterState:
    from .bank import read_records

    directory = Path(directory)
    tier, grid_h, grid_w, dim, records = read_records(directory / "centroids.fvsb")
    meta = json.loads((directory / "state.json").read_text())
    c, w, p, m = _as_state_arrays(records.astype(np.float64),
                                  meta["weights"], meta["position_sums"],
                                  meta["member_counts"])
    return ClusterState(grid_h, grid_w, dim, c, w, p, m)
