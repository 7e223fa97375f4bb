"""Ablation policy zoo: alternative consolidation strategies behind one
interface, plus the cost/structure benchmark harness.

Only the k-means policy guarantees centroid-equals-weighted-mean; the others
are runnable baselines. Accuracy comparisons from the source benchmarks need
a language model and are out of scope; the harness reports structural
metrics instead: per-step update cost, within-cluster weighted variance
(mean squared distance of every stream frame to its nearest memory
centroid), memory size, weight conservation, and selection overlap against
the default policy.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace

import numpy as np

from .bank import FeatureBank
from .csm import (ClusterState, _as_state_arrays, add_singleton, csm_update,
                  empty_state, weighted_lloyd)
from .dam import retrieve_key_frames
from .errors import ConfigError
from .synth import StreamSpec, generate
from .types import ClusteringPolicy, FeatureMap, MemoryConfig, Tier

log = logging.getLogger("vstream.policies")


def _state_from_rows(grid, rows, weights, psums, counts) -> ClusterState:
    c, w, p, m = _as_state_arrays(np.asarray(rows, dtype=np.float64),
                                  weights, psums, counts)
    return ClusterState(*grid, c, w, p, m)


class ConsolidationPolicy:
    """Streaming consolidation strategy; may keep auxiliary per-run state."""

    name: str
    weight_conserving: bool = True

    def __init__(self, config: MemoryConfig):
        self.config = config

    def ingest(self, state: ClusterState, feature: FeatureMap) -> ClusterState:
        """Warm-up plus steady-state consolidation for one frame."""
        if state.count < self.config.n_csm:
            return add_singleton(state, feature)
        return self.consolidate(state, feature)

    def consolidate(self, state: ClusterState,
                    feature: FeatureMap) -> ClusterState:
        raise NotImplementedError


class KMeansPolicy(ConsolidationPolicy):
    name = "kmeans"

    def consolidate(self, state, feature):
        return csm_update(state, feature, self.config)


class UniformSamplePolicy(ConsolidationPolicy):
    """Deterministic stride-doubling systematic sampler.

    Keeps frames whose index is a multiple of 2^k, doubling the stride
    whenever the kept set would exceed capacity (120 steps at capacity 60
    keep exactly every 2nd frame). Each kept frame is weighted by the number
    of stream indices it covers, so total weight equals the step count.
    """

    name = "uniform"

    def __init__(self, config):
        super().__init__(config)
        self.stride = 1
        self.kept_indices: list[int] = []
        self.kept_values: list[np.ndarray] = []
        self.steps = 0

    def ingest(self, state, feature):
        index = feature.frame_index
        self.steps = index + 1
        if index % self.stride == 0:
            self.kept_indices.append(index)
            self.kept_values.append(feature.flat())
            while len(self.kept_indices) > self.config.n_csm:
                self.stride *= 2
                keep = [i for i, idx in enumerate(self.kept_indices)
                        if idx % self.stride == 0]
                self.kept_indices = [self.kept_indices[i] for i in keep]
                self.kept_values = [self.kept_values[i] for i in keep]
        return self._build_state(feature)

    consolidate = ingest

    def _build_state(self, feature):
        grid = (feature.grid_h, feature.grid_w, feature.dim)
        n = len(self.kept_indices)
        weights = np.empty(n, dtype=np.int64)
        for i, idx in enumerate(self.kept_indices):
            nxt = self.kept_indices[i + 1] if i + 1 < n else self.steps
            weights[i] = nxt - idx
        psums = weights * np.asarray(self.kept_indices, dtype=np.int64)
        return _state_from_rows(grid, np.stack(self.kept_values), weights,
                                psums, weights.copy())


class _NeighborPolicy(ConsolidationPolicy):
    """Shared machinery: overflow resolved on the most similar adjacent pair
    (adjacency in temporal-position order, ties to the earlier pair)."""

    def consolidate(self, state, feature):
        state = add_singleton(state, feature)
        order = np.argsort(state.positions(), kind="stable")
        rows = state.centroids[order]
        diffs = rows[:-1] - rows[1:]
        pair = int(np.argmin(np.square(diffs).sum(axis=1)))
        left, right = int(order[pair]), int(order[pair + 1])
        return self._resolve(state, left, right)

    def _resolve(self, state, left, right):
        raise NotImplementedError


class NeighborMergePolicy(_NeighborPolicy):
    name = "neighbor_merge"

    def _resolve(self, state, left, right):
        w = state.weights
        merged = (w[left] * state.centroids[left]
                  + w[right] * state.centroids[right]) / (w[left] + w[right])
        keep = [i for i in range(state.count) if i != right]
        rows = state.centroids[keep].copy()
        weights = state.weights[keep].copy()
        psums = state.position_sums[keep].copy()
        counts = state.member_counts[keep].copy()
        slot = keep.index(left)
        rows[slot] = merged
        weights[slot] = w[left] + w[right]
        psums[slot] = state.position_sums[left] + state.position_sums[right]
        counts[slot] = state.member_counts[left] + state.member_counts[right]
        return _state_from_rows((state.grid_h, state.grid_w, state.dim),
                                rows, weights, psums, counts)


class NeighborDropPolicy(_NeighborPolicy):
    """Randomly keeps one frame of the most similar adjacent pair and drops
    the other; conserves the kept-frame count, not the total weight."""

    name = "neighbor_drop"
    weight_conserving = False

    def __init__(self, config):
        super().__init__(config)
        self._rng = np.random.Generator(np.random.Philox(key=config.policy_seed))

    def _resolve(self, state, left, right):
        drop = left if self._rng.integers(0, 2) == 0 else right
        keep = [i for i in range(state.count) if i != drop]
        return _state_from_rows(
            (state.grid_h, state.grid_w, state.dim),
            state.centroids[keep], state.weights[keep],
            state.position_sums[keep], state.member_counts[keep])


def _dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Labels for a small point set; noise points get fresh singleton labels.

    Deterministic: clusters expand from core points in index order.
    """
    m = len(points)
    d2 = np.square(points[:, None, :] - points[None, :, :]).sum(axis=2)
    neighbors = [np.flatnonzero(d2[i] <= eps * eps) for i in range(m)]
    core = [len(n) >= min_pts for n in neighbors]
    labels = np.full(m, -1, dtype=np.int64)
    current = 0
    for i in range(m):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = current
        frontier = [i]
        while frontier:
            p = frontier.pop(0)
            for q in neighbors[p]:
                if labels[q] == -1:
                    labels[q] = current
                    if core[q]:
                        frontier.append(int(q))
        current += 1
    for i in range(m):
        if labels[i] == -1:
            labels[i] = current
            current += 1
    return labels


class DbscanPolicy(ConsolidationPolicy):
    """Density-based adapter: eps is half the median pairwise distance of the
    warm-up window, minPts=2; clusters beyond capacity are merged into the
    nearest kept cluster by size order. Runnable, not tuned: the task fixes
    the cluster count, which density clustering does not."""

    name = "dbscan"

    def __init__(self, config):
        super().__init__(config)
        self._warmup: list[np.ndarray] = []
        self.eps = None

    def ingest(self, state, feature):
        if state.count < self.config.n_csm:
            self._warmup.append(feature.flat())
            return add_singleton(state, feature)
        return self.consolidate(state, feature)

    def consolidate(self, state, feature):
        if self.eps is None:
            self.eps = self._median_pairwise() * 0.5
        points = np.concatenate([state.centroids, feature.flat()[None, :]])
        weights = np.append(state.weights, 1)
        psums = np.append(state.position_sums, feature.frame_index)
        counts = np.append(state.member_counts, 1)
        labels = _dbscan(points, self.eps, 2)
        groups: dict[int, list[int]] = {}
        for i, lab in enumerate(labels):
            groups.setdefault(int(lab), []).append(i)
        ordered = sorted(groups.values(),
                         key=lambda ix: (-int(weights[ix].sum()), min(ix)))
        kept = ordered[:self.config.n_csm]
        centroids = [np.average(points[ix], axis=0, weights=weights[ix])
                     for ix in kept]
        for ix in ordered[self.config.n_csm:]:
            group_mean = np.average(points[ix], axis=0, weights=weights[ix])
            nearest = int(np.argmin([np.square(group_mean - c).sum()
                                     for c in centroids]))
            merged = kept[nearest] + ix
            centroids[nearest] = np.average(points[merged], axis=0,
                                            weights=weights[merged])
            kept[nearest] = merged
        rows = np.stack(centroids)
        return _state_from_rows(
            (state.grid_h, state.grid_w, state.dim), rows,
            [int(weights[ix].sum()) for ix in kept],
            [int(psums[ix].sum()) for ix in kept],
            [int(counts[ix].sum()) for ix in kept])

    def _median_pairwise(self):
        if len(self._warmup) < 2:
            return 1.0
        pts = np.stack(self._warmup)
        d2 = np.square(pts[:, None, :] - pts[None, :, :]).sum(axis=2)
        upper = d2[np.triu_indices(len(pts), k=1)]
        return float(np.median(np.sqrt(upper)))


class GmmPolicy(ConsolidationPolicy):
    """Diagonal-covariance EM (20 iterations, k-means initialized); hard
    assignment merges weights. Non-convergence falls back to the previous
    state with a logged warning."""

    name = "gmm"
    EM_ITERS = 20
    VAR_FLOOR = 1e-6

    def consolidate(self, state, feature):
        points = np.concatenate([state.centroids, feature.flat()[None, :]])
        weights = np.append(state.weights, 1).astype(np.float64)
        psums = np.append(state.position_sums, feature.frame_index)
        counts = np.append(state.member_counts, 1)
        k = self.config.n_csm
        try:
            init = weighted_lloyd(points, weights.astype(np.int64), psums,
                                  state.centroids, self.config.kmeans_max_iters)
            assign = self._em_hard_assign(points, weights, init.centroids, k)
        except (FloatingPointError, ValueError, ZeroDivisionError) as exc:
            log.warning("GMM consolidation failed (%s); keeping previous state",
                        exc)
            return state
        if assign is None:
            log.warning("GMM produced a degenerate assignment; "
                        "keeping previous state")
            return state
        out_w = np.zeros(k, dtype=np.int64)
        out_p = np.zeros(k, dtype=np.int64)
        out_m = np.zeros(k, dtype=np.int64)
        np.add.at(out_w, assign, weights.astype(np.int64))
        np.add.at(out_p, assign, psums)
        np.add.at(out_m, assign, counts)
        onehot = np.zeros((k, len(points)))
        onehot[assign, np.arange(len(points))] = weights
        centroids = (onehot @ points) / onehot.sum(axis=1)[:, None]
        return _state_from_rows((state.grid_h, state.grid_w, state.dim),
                                centroids, out_w, out_p, out_m)

    def _em_hard_assign(self, points, weights, mu, k):
        m, dim = points.shape
        var = np.full((k, dim), 1.0)
        pi = np.full(k, 1.0 / k)
        for _ in range(self.EM_ITERS):
            log_det = np.log(var).sum(axis=1)
            diff2 = (points[:, None, :] - mu[None, :, :]) ** 2
            log_prob = (-0.5 * (diff2 / var[None, :, :]).sum(axis=2)
                        - 0.5 * log_det[None, :] + np.log(pi)[None, :])
            shift = log_prob.max(axis=1, keepdims=True)
            resp = np.exp(log_prob - shift)
            total = resp.sum(axis=1, keepdims=True)
            if not np.all(np.isfinite(total)) or np.any(total <= 0):
                return None
            resp /= total
            wr = resp * weights[:, None]
            comp_w = wr.sum(axis=0)
            if np.any(comp_w <= 0):
                comp_w = np.maximum(comp_w, 1e-12)
            mu = (wr.T @ points) / comp_w[:, None]
            var = (wr.T @ (points ** 2)) / comp_w[:, None] - mu ** 2
            var = np.maximum(var, self.VAR_FLOOR)
            pi = comp_w / comp_w.sum()
        assign = np.argmax(resp, axis=1)
        # Repair empty components deterministically (farthest point rule).
        counts = np.bincount(assign, minlength=k)
        d2 = (np.square(points[:, None, :] - mu[None, :, :])).sum(axis=2)
        to_own = d2[np.arange(m), assign]
        for j in np.flatnonzero(counts == 0):
            eligible = np.flatnonzero(counts[assign] >= 2)
            if len(eligible) == 0:
                return None
            move = eligible[np.argmax(to_own[eligible])]
            counts[assign[move]] -= 1
            assign[move] = j
            counts[j] = 1
        return assign


_POLICY_CLASSES = {
    ClusteringPolicy.KMEANS: KMeansPolicy,
    ClusteringPolicy.UNIFORM: UniformSamplePolicy,
    ClusteringPolicy.NEIGHBOR_MERGE: NeighborMergePolicy,
    ClusteringPolicy.NEIGHBOR_DROP: NeighborDropPolicy,
    ClusteringPolicy.DBSCAN: DbscanPolicy,
    ClusteringPolicy.GMM: GmmPolicy,
}


def make_policy(policy: ClusteringPolicy | str,
                config: MemoryConfig) -> ConsolidationPolicy:
    if isinstance(policy, str):
        policy = ClusteringPolicy(policy)
    return _POLICY_CLASSES[policy](config)


def consolidate_with(policy: ConsolidationPolicy, state: ClusterState,
                     new_feature: FeatureMap) -> ClusterState:
    """One steady-state consolidation step under the given policy."""
    return policy.consolidate(state, new_feature)


@dataclass
class PolicyMetrics:
    policy: str
    config_label: str
    steps: int
    mean_update_seconds: float
    median_update_seconds: float
    within_cluster_weighted_variance: float
    memory_size_bytes: int
    memory_items: int
    total_weight: int
    weight_conserved: bool
    selection_overlap_vs_default: float
    valid: bool = True
    note: str = ""

    def as_dict(self) -> dict:
        return dict(self.__dict__)


FIELDNAMES = list(PolicyMetrics("", "", 0, 0.0, 0.0, 0.0, 0, 0, 0, True,
                                0.0).as_dict().keys())


def run_policy_stream(spec: StreamSpec, config: MemoryConfig,
                      policy_name, keep_banks: bool = False):
    """Run one policy over a generated stream.

    Returns (final_state, per_step_seconds, low_frames, banks) where banks is
    (low_bank, high_bank) when keep_banks else None.
    """
    policy = make_policy(policy_name, config)
    h, w = config.grid_low
    state = empty_state(h, w, config.dim)
    step_seconds = []
    low_frames = []
    banks = None
    if keep_banks:
        hh, hw = config.grid_high
        banks = (FeatureBank(Tier.LOW, h, w, config.dim),
                 FeatureBank(Tier.HIGH, hh, hw, config.dim))
    for low, high in generate(spec):
        if banks is not None:
            banks[0].append(low)
            banks[1].append(high)
        low_frames.append(low.flat())
        started = time.thread_time_ns()   # CPU time: immune to scheduler noise
        state = policy.ingest(state, low)
        step_seconds.append((time.thread_time_ns() - started) / 1e9)
    return state, np.asarray(step_seconds), low_frames, banks


def within_cluster_variance(frames, state: ClusterState) -> float:
    """Mean squared distance of each stream frame to its nearest centroid."""
    if state.count == 0 or not frames:
        return float("nan")
    pts = np.stack(frames)
    total = 0.0
    for row in pts:
        total += float(np.min(np.square(state.centroids - row).sum(axis=1)))
    return total / len(pts)


def jaccard(a, b) -> float:
    sa, sb = set(a), set(b)
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


def capacity_grid(base: MemoryConfig, r_csm_values, r_pool_values,
                  budget: int | None = None):
    """Configs for an (R_csm, R_pool) grid at a fixed token budget.

    The budget defaults to the base configuration's own token budget. Yields
    (label, config-or-None, note); invalid cells (non-positive or inverted
    capacities, budget violations) carry a note and a None config.
    """
    budget = base.token_budget() if budget is None else budget
    low_tokens = base.spatial_size_low // base.merger_ratio
    for r_csm in r_csm_values:
        for r_pool in r_pool_values:
            label = f"r_csm={r_csm:.3f},r_pool={r_pool}"
            high_spatial = base.spatial_size_low * r_pool
            high_tokens = high_spatial // base.merger_ratio
            n_csm = round(r_csm * budget) // low_tokens
            n_dam = round((1.0 - r_csm) * budget) // high_tokens
            try:
                if n_csm < 1 or n_dam < 1:
                    raise ConfigError(
                        f"empty memory: n_csm={n_csm}, n_dam={n_dam}")
                config = base.with_updates(
                    n_csm=n_csm, n_dam=n_dam, pool_ratio=r_pool,
                    spatial_size_high=high_spatial, budget_limit=budget)
            except ConfigError as exc:
                yield label, None, str(exc)
                continue
            yield label, config, ""


def bench_policies(spec: StreamSpec, policy_list, configs=None,
                   default_policy=ClusteringPolicy.KMEANS):
    """Metrics table: one row per (policy, config) cell.

    Selection overlap compares each policy's key-frame choice against the
    default policy's under the same config.
    """
    if configs is None:
        base = MemoryConfig(
            n_csm=min(12, max(2, spec.n_steps // 4)),
            n_dam=min(6, max(1, spec.n_steps // 8)),
            spatial_size_low=spec.spatial_size_low,
            spatial_size_high=spec.spatial_size_high,
            dim=spec.dim, pool_ratio=spec.pool_ratio)
        configs = [("default", base, "")]
    rows = []
    for label, config, note in configs:
        if config is None:
            rows.append(PolicyMetrics(
                policy="-", config_label=label, steps=0,
                mean_update_seconds=float("nan"),
                median_update_seconds=float("nan"),
                within_cluster_weighted_variance=float("nan"),
                memory_size_bytes=0, memory_items=0, total_weight=0,
                weight_conserved=False,
                selection_overlap_vs_default=float("nan"),
                valid=False, note=note))
            continue
        # The grid varies the pooling ratio; the stream's high tier must match.
        cell_spec = replace(spec, pool_ratio=config.pool_ratio,
                            spatial_size_low=config.spatial_size_low)
        default_selection = None
        for name in [default_policy] + [p for p in policy_list
                                        if ClusteringPolicy(p) != default_policy]:
            name = ClusteringPolicy(name)
            state, seconds, frames, banks = run_policy_stream(
                cell_spec, config, name, keep_banks=True)
            dam = retrieve_key_frames(state, banks[0], banks[1], config)
            selection = dam.frame_indices()
            if name == default_policy:
                default_selection = selection
                if default_policy not in [ClusteringPolicy(p)
                                          for p in policy_list]:
                    continue
            rows.append(PolicyMetrics(
                policy=name.value, config_label=label, steps=spec.n_steps,
                mean_update_seconds=float(seconds.mean()),
                median_update_seconds=float(np.median(seconds)),
                within_cluster_weighted_variance=within_cluster_variance(
                    frames, state),
                memory_size_bytes=state.centroids.nbytes,
                memory_items=state.count,
                total_weight=state.total_weight,
                weight_conserved=state.total_weight == spec.n_steps,
                selection_overlap_vs_default=jaccard(selection,
                                                     default_selection),
                valid=True, note=""))
    return rows
