"""Detail augmentation memory: key-frame retrieval against synopsis anchors.

Anchors are the centroids of the selected clusters (largest by weight under
the default selection policy). For each anchor, the key frame is the frame
whose low-resolution map minimizes the anchor distance; its high-resolution
map is loaded from the bank. Collisions (two anchors choosing one frame) are
resolved in rank order: the higher rank keeps the frame and the lower rank
re-runs its argmin excluding already-selected frames.

Retrieval keeps a per-cluster cache of the ``n_dam`` best candidates so a
repeat query against an unchanged state costs O(n_dam^2) instead of O(t).
The cache is exact: it is invalidated by bitwise centroid comparison and
extended incrementally for frames appended since the last scan. Holding the
n_dam best (not just the best) keeps collision dedup exact without rescans.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bank import FeatureBank
from .csm import ClusterState
from .errors import BankIntegrityError, InvalidStateError
from .types import FeatureMap, MemoryConfig, RetrievalPolicy, SelectionPolicy


@dataclass(frozen=True, eq=False)
class DamEntry:
    frame_index: int
    anchor_cluster_rank: int
    anchor_cluster_index: int
    distance_to_anchor: float
    feature: FeatureMap


@dataclass(frozen=True, eq=False)
class DamState:
    entries: tuple[DamEntry, ...]

    def frame_indices(self) -> list[int]:
        return [e.frame_index for e in self.entries]

    def positions(self) -> list[int]:
        return [e.frame_index for e in self.entries]


def rank_clusters(state: ClusterState) -> list[int]:
    """Cluster indices by weight descending, ties to the lower index."""
    if state.count == 0:
        raise InvalidStateError("cannot rank an empty cluster state")
    weights = state.weights
    return sorted(range(state.count), key=lambda k: (-int(weights[k]), k))


def select_anchor_clusters(state: ClusterState, config: MemoryConfig) -> list[int]:
    """Apply the selection policy; returns cluster indices in rank order."""
    k = min(config.n_dam, state.count)
    if k == 0:
        return []
    policy = config.selection_policy
    if policy is SelectionPolicy.LARGEST:
        return rank_clusters(state)[:k]
    if policy is SelectionPolicy.SMALLEST:
        weights = state.weights
        return sorted(range(state.count),
                      key=lambda j: (int(weights[j]), j))[:k]
    # Uniform over cluster slots: k evenly spaced indices.
    if k == 1:
        return [0]
    n = state.count
    return sorted({round(j * (n - 1) / (k - 1)) for j in range(k)})


@dataclass
class _AnchorCache:
    centroid: np.ndarray
    scanned_upto: int
    best: list   # [(score, frame_index)] ascending, len <= capacity


@dataclass
class RetrievalCache:
    """Per-(policy, cluster) candidate lists; safe to reuse across queries."""

    capacity: int
    entries: dict[tuple, _AnchorCache] = field(default_factory=dict)

    def invalidate(self):
        self.entries.clear()


def _merge_candidates(best, scores, start_index, capacity):
    """Fold a chunk of (score, frame) pairs into a sorted top-k list."""
    order = np.argsort(scores, kind="stable")[:capacity]
    merged = best + [(float(scores[i]), start_index + int(i)) for i in order]
    merged.sort()
    return merged[:capacity]


def _euclidean_scores(block, anchor):
    diff = block - anchor
    return np.square(diff).sum(axis=1)


def _cosine_scores(block, anchor):
    # Returned as a "smaller is better" score: negated similarity, with zero
    # vectors scoring similarity 0 by convention.
    anchor_norm = math.sqrt(float(np.square(anchor).sum()))
    norms = np.sqrt(np.square(block).sum(axis=1))
    sims = np.zeros(block.shape[0], dtype=np.float64)
    if anchor_norm > 0.0:
        nonzero = norms > 0.0
        sims[nonzero] = (block[nonzero] @ anchor) / (norms[nonzero] * anchor_norm)
    return -sims


def _feature_scan_jobs(state, anchors, low_bank, upto, cache, scorer, policy):
    """Refresh cached top-k lists for every anchor, scanning the bank once.

    Returns {cluster_index: _AnchorCache} for the requested anchors. With
    ``cache=None`` the lists are computed fresh and discarded afterwards.
    """
    capacity = cache.capacity if cache is not None else len(anchors)
    resolved: dict[int, _AnchorCache] = {}
    jobs = []
    for cluster in anchors:
        centroid = state.centroids[cluster]
        key = (policy.value, cluster)
        entry = cache.entries.get(key) if cache is not None else None
        if entry is None or not np.array_equal(entry.centroid, centroid):
            entry = _AnchorCache(centroid.copy(), 0, [])
            if cache is not None:
                cache.entries[key] = entry
        resolved[cluster] = entry
        if entry.scanned_upto < upto:
            jobs.append((cluster, entry.scanned_upto, entry))
    if not jobs:
        return resolved
    scan_start = min(start for _, start, _ in jobs)
    for chunk_start, block in low_bank.scan_chunks(upto, start=scan_start):
        chunk_end = chunk_start + block.shape[0]
        for cluster, start, entry in jobs:
            lo = max(start, chunk_start)
            if lo >= chunk_end:
                continue
            sub = block[lo - chunk_start:]
            scores = scorer(sub, state.centroids[cluster])
            entry.best = _merge_candidates(entry.best, scores, lo, capacity)
    for cluster, _, entry in jobs:
        entry.scanned_upto = upto
    return resolved


def _temporal_order(position: float, n_frames: int):
    """Frame indices by |i - position| ascending, ties to the lower index."""
    center = math.ceil(position - 0.5)
    center = min(max(center, 0), n_frames - 1)
    yield center
    left, right = center - 1, center + 1
    while left >= 0 or right < n_frames:
        if left >= 0 and right < n_frames:
            if abs(left - position) <= abs(right - position):
                yield left
                left -= 1
            else:
                yield right
                right += 1
        elif left >= 0:
            yield left
            left -= 1
        else:
            yield right
            right += 1


def retrieve_key_frames(state: ClusterState, low_bank: FeatureBank,
                        high_bank: FeatureBank, config: MemoryConfig,
                        cache: RetrievalCache | None = None,
                        upto: int | None = None) -> DamState:
    """Select up to n_dam key frames for the current synopsis state.

    ``upto`` bounds the candidate frames (exclusive); it defaults to the low
    bank's committed count and is pinned by the runtime to the snapshot
    watermark so concurrent appends cannot leak in.
    """
    if upto is None:
        upto = low_bank.count
    if state.count == 0 or upto == 0 or config.n_dam == 0:
        return DamState(entries=())
    anchors = select_anchor_clusters(state, config)
    policy = config.retrieval_policy

    if policy is RetrievalPolicy.TEMPORAL:
        positions = state.positions()
        selected: list[int] = []
        chosen = []
        for rank, cluster in enumerate(anchors):
            pos = float(positions[cluster])
            pick = next(i for i in _temporal_order(pos, upto)
                        if i not in selected)
            selected.append(pick)
            chosen.append((rank, cluster, pick, abs(pick - pos)))
    else:
        scorer = (_euclidean_scores if policy is RetrievalPolicy.EUCLIDEAN
                  else _cosine_scores)
        entries = _feature_scan_jobs(state, anchors, low_bank, upto, cache,
                                     scorer, policy)
        selected = []
        chosen = []
        for rank, cluster in enumerate(anchors):
            best = entries[cluster].best
            pick = next(((score, idx) for score, idx in best
                         if idx not in selected), None)
            if pick is None:
                raise InvalidStateError(
                    f"anchor {cluster}: candidate list exhausted "
                    f"({len(best)} candidates, {len(selected)} selected)")
            selected.append(pick[1])
            score = pick[0]
            if policy is RetrievalPolicy.COSINE:
                score = -score
            chosen.append((rank, cluster, pick[1], score))

    out = []
    for rank, cluster, frame, score in chosen:
        if frame >= high_bank.count:
            raise BankIntegrityError(
                f"high-res map for frame {frame} missing from bank "
                f"(count={high_bank.count})")
        out.append(DamEntry(frame_index=frame, anchor_cluster_rank=rank,
                            anchor_cluster_index=cluster,
                            distance_to_anchor=float(score),
                            feature=high_bank.read(frame)))
    return DamState(entries=tuple(out))


def retrieve_with_policy(state: ClusterState, low_bank: FeatureBank,
                         high_bank: FeatureBank, config: MemoryConfig,
                         retrieval: RetrievalPolicy | None = None,
                         selection: SelectionPolicy | None = None,
                         cache: RetrievalCache | None = None,
                         upto: int | None = None) -> DamState:
    """retrieve_key_frames with the policy fields overridden."""
    overrides = {}
    if retrieval is not None:
        overrides["retrieval_policy"] = retrieval
    if selection is not None:
        overrides["selection_policy"] = selection
    cfg = config.with_updates(**overrides) if overrides else config
    return retrieve_key_frames(state, low_bank, high_bank, cfg,
                               cache=cache, upto=upto)
