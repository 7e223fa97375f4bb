"""Interleaved snapshot assembly and the position-triplet / export surface.

The snapshot interleaves synopsis items (cluster centroids at their mean
member frame index) with key-frame items (high-res maps at their frame
index), sorted by temporal position. Equal positions order synopsis items
first, then lower cluster/frame index. Every LLM token of every item gets a
(time, height, width) position triplet; synopsis tokens keep fractional
times, key-frame token coordinates are doubled under the default (literal)
scale target to account for the resolution gap.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .csm import ClusterState, csm_positions
from .dam import DamState
from .errors import InvalidStateError, ParseError
from .types import (FeatureMap, MemoryConfig, PositionTriplet, Tier,
                    config_as_dict)

SOURCE_CSM = "csm"
SOURCE_DAM = "dam"


@dataclass(frozen=True, eq=False)
class MemoryItem:
    source: str                # SOURCE_CSM or SOURCE_DAM
    temporal_position: float
    index: int                 # cluster index (csm) or frame index (dam)
    feature: FeatureMap


@dataclass(frozen=True, eq=False)
class FlashMemorySnapshot:
    items: tuple[MemoryItem, ...]
    token_positions: np.ndarray    # (token_count, 3) float64 rows (n_t, n_h, n_w)
    token_count: int
    snapshot_frame_count: int
    config: MemoryConfig

    def triplets(self):
        for n_t, n_h, n_w in self.token_positions:
            yield PositionTriplet(float(n_t), int(n_h), int(n_w))


def am_rope_triplets(item: MemoryItem, config: MemoryConfig) -> np.ndarray:
    """Per-token position triplets for one memory item, row-major (y, x).

    Synopsis token at token-grid (x, y): (position, y, x); key-frame token:
    (frame, 2y, 2x) under the default "dam" scale target. The "csm" target
    flips which source gets the doubled coordinates (grid-aligned variant).
    """
    th, tw = config.token_grid(item.feature.grid_h, item.feature.grid_w)
    scale = 1
    if item.source == SOURCE_DAM and config.rope_scale_target == "dam":
        scale = 2
    if item.source == SOURCE_CSM and config.rope_scale_target == "csm":
        scale = 2
    ys, xs = np.meshgrid(np.arange(th), np.arange(tw), indexing="ij")
    out = np.empty((th * tw, 3), dtype=np.float64)
    out[:, 0] = item.temporal_position
    out[:, 1] = (ys.reshape(-1) * scale)
    out[:, 2] = (xs.reshape(-1) * scale)
    return out


def assemble(csm_state: ClusterState, dam_state: DamState,
             config: MemoryConfig, snapshot_frame_count: int | None = None
             ) -> FlashMemorySnapshot:
    """Interleave both memories into a temporally sorted token snapshot."""
    items = []
    if csm_state.count:
        if (csm_state.grid_h * csm_state.grid_w) != config.spatial_size_low:
            raise InvalidStateError(
                f"cluster grid {csm_state.grid_h}x{csm_state.grid_w} does not "
                f"match configured low spatial size {config.spatial_size_low}")
        positions = csm_positions(csm_state)
        for k in range(csm_state.count):
            grid = csm_state.centroid_grid(k).astype(np.float32)
            feature = FeatureMap(frame_index=0, grid_h=csm_state.grid_h,
                                 grid_w=csm_state.grid_w, dim=csm_state.dim,
                                 values=grid, tier=Tier.LOW)
            items.append(MemoryItem(SOURCE_CSM, float(positions[k]), k, feature))
    for entry in dam_state.entries:
        if entry.feature.spatial_size != config.spatial_size_high:
            raise InvalidStateError(
                f"key frame grid {entry.feature.grid_h}x{entry.feature.grid_w} "
                f"does not match configured high spatial size "
                f"{config.spatial_size_high}")
        items.append(MemoryItem(SOURCE_DAM, float(entry.frame_index),
                                entry.frame_index, entry.feature))

    items.sort(key=lambda it: (it.temporal_position,
                               0 if it.source == SOURCE_CSM else 1,
                               it.index))
    if items:
        position_blocks = [am_rope_triplets(it, config) for it in items]
        token_positions = np.concatenate(position_blocks)
    else:
        token_positions = np.empty((0, 3), dtype=np.float64)
    token_positions.flags.writeable = False
    if snapshot_frame_count is None:
        snapshot_frame_count = csm_state.total_weight if csm_state.count else 0
    return FlashMemorySnapshot(items=tuple(items),
                               token_positions=token_positions,
                               token_count=token_positions.shape[0],
                               snapshot_frame_count=snapshot_frame_count,
                               config=config)


def snapshots_equal(a: FlashMemorySnapshot, b: FlashMemorySnapshot) -> bool:
    if (a.token_count, a.snapshot_frame_count) != (b.token_count,
                                                   b.snapshot_frame_count):
        return False
    if len(a.items) != len(b.items):
        return False
    if a.token_positions.tobytes() != b.token_positions.tobytes():
        return False
    for x, y in zip(a.items, b.items):
        if (x.source, x.temporal_position, x.index) != (
                y.source, y.temporal_position, y.index):
            return False
        if x.feature.values.tobytes() != y.feature.values.tobytes():
            return False
    return True


def export_snapshot(snapshot: FlashMemorySnapshot, sink,
                    provenance: dict | None = None) -> None:
    """Serialize a snapshot to a self-contained JSON document.

    Feature payloads are raw float32 little-endian record bytes (the bank
    record encoding), base64 wrapped. The document round-trips exactly via
    load_snapshot.
    """
    doc = {
        "format": "vstream-snapshot",
        "version": 1,
        "config": config_as_dict(snapshot.config),
        "snapshot_frame_count": snapshot.snapshot_frame_count,
        "token_count": snapshot.token_count,
        "token_positions_b64": base64.b64encode(
            snapshot.token_positions.astype("<f8").tobytes()).decode("ascii"),
        "items": [
            {
                "source": it.source,
                "temporal_position": it.temporal_position,
                "index": it.index,
                "frame_index": it.feature.frame_index,
                "grid_h": it.feature.grid_h,
                "grid_w": it.feature.grid_w,
                "dim": it.feature.dim,
                "tier": it.feature.tier.value,
                "values_b64": base64.b64encode(
                    it.feature.values.astype("<f4").tobytes()).decode("ascii"),
            }
            for it in snapshot.items
        ],
    }
    if provenance:
        doc["provenance"] = provenance
    text = json.dumps(doc)
    if hasattr(sink, "write"):
        sink.write(text)
    else:
        Path(sink).write_text(text)


def load_snapshot(source) -> FlashMemorySnapshot:
    if hasattr(source, "read"):
        doc = json.loads(source.read())
    else:
        doc = json.loads(Path(source).read_text())
    if doc.get("format") != "vstream-snapshot":
        raise ParseError(f"not a snapshot document: {doc.get('format')!r}")
    config = MemoryConfig(**{k: _coerce_config_value(k, v)
                             for k, v in doc["config"].items()})
    items = []
    for it in doc["items"]:
        raw = base64.b64decode(it["values_b64"])
        values = np.frombuffer(raw, dtype="<f4").reshape(
            it["grid_h"], it["grid_w"], it["dim"])
        feature = FeatureMap(frame_index=it["frame_index"], grid_h=it["grid_h"],
                             grid_w=it["grid_w"], dim=it["dim"], values=values,
                             tier=Tier(it["tier"]))
        items.append(MemoryItem(it["source"], it["temporal_position"],
                                it["index"], feature))
    raw = base64.b64decode(doc["token_positions_b64"])
    token_positions = np.frombuffer(raw, dtype="<f8").reshape(-1, 3)
    token_positions.flags.writeable = False
    if token_positions.shape[0] != doc["token_count"]:
        raise ParseError(
            f"token payload holds {token_positions.shape[0]} rows, "
            f"metadata says {doc['token_count']}")
    return FlashMemorySnapshot(items=tuple(items),
                               token_positions=token_positions,
                               token_count=doc["token_count"],
                               snapshot_frame_count=doc["snapshot_frame_count"],
                               config=config)


def _coerce_config_value(key, value):
    from .types import ClusteringPolicy, RetrievalPolicy, SelectionPolicy

    coercers = {"clustering_policy": ClusteringPolicy,
                "retrieval_policy": RetrievalPolicy,
                "selection_policy": SelectionPolicy}
    return coercers[key](value) if key in coercers else value


def export_pca_csv(snapshot: FlashMemorySnapshot, low_bank, high_bank, path,
                   provenance: dict | None = None) -> int:
    """Write memory-item and frame feature vectors for offline projection.

    One row per memory item and one row per frame per tier, tagged with the
    feature space so a plotting tool can project synopsis items against
    low-res frames and key-frame items against high-res frames. Returns the
    data row count.
    """
    rows = 0
    with open(path, "w") as fh:
        if provenance:
            fh.write("# " + json.dumps(provenance) + "\n")
        fh.write("kind,space,index,temporal_position,values...\n")

        def emit(kind, space, index, position, vec):
            nonlocal rows
            fh.write(f"{kind},{space},{index},{position},")
            fh.write(",".join(repr(float(v)) for v in vec))
            fh.write("\n")
            rows += 1

        for item in snapshot.items:
            space = "low" if item.source == SOURCE_CSM else "high"
            emit("memory", space, item.index, item.temporal_position,
                 item.feature.values.reshape(-1))
        t = snapshot.snapshot_frame_count
        for i in range(min(t, low_bank.count)):
            emit("frame", "low", i, float(i), low_bank.vector(i))
        for i in range(min(t, high_bank.count)):
            emit("frame", "high", i, float(i), high_bank.vector(i))
    return rows
