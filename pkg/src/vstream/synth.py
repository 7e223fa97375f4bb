"""Deterministic synthetic feature streams and precomputed-feature ingestion.

Streams emulate temporal redundancy: scenes are Gaussian blobs around a
scene centroid, revisited round-robin with random segment lengths, with an
optional slow per-scene drift. The high-resolution map of a step is the
low-resolution map replicated block-wise (so block-average pooling recovers
the low map exactly) plus seeded detail noise.

Randomness comes from numpy's Philox 4x64 counter-based generator keyed by
the spec seed; the draw order is fixed (scene centroids, drift directions,
segment lengths as needed, then per step: low noise, high detail noise), so
a (spec, seed) pair reproduces the stream bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bank import read_records, write_records
from .errors import ConfigError, ParseError
from .types import FeatureMap, Tier, _grid_shape, _square_side


@dataclass(frozen=True)
class StreamSpec:
    seed: int = 0
    n_steps: int = 120
    n_scenes: int = 3
    scene_length_min: int = 10
    scene_length_max: int = 40
    cluster_spread: float = 0.05
    spatial_size_low: int = 16
    pool_ratio: int = 4
    dim: int = 64
    drift_rate: float = 0.0
    detail_noise: float = 0.0
    scene_scale: float = 4.0

    def __post_init__(self):
        if self.n_scenes < 1:
            raise ConfigError("n_scenes must be >= 1")
        if self.cluster_spread < 0:
            raise ConfigError("cluster_spread must be >= 0")
        if self.scene_length_min < 1 or self.scene_length_max < self.scene_length_min:
            raise ConfigError("scene length bounds must satisfy 1 <= min <= max")

    @property
    def spatial_size_high(self) -> int:
        return self.spatial_size_low * self.pool_ratio

    @property
    def grid_low(self) -> tuple[int, int]:
        return _grid_shape(self.spatial_size_low)

    @property
    def grid_high(self) -> tuple[int, int]:
        side = _square_side(self.pool_ratio, "pool_ratio")
        h, w = self.grid_low
        return h * side, w * side


def _rng(spec: StreamSpec) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=spec.seed))


def scene_labels(spec: StreamSpec) -> list[int]:
    """Ground-truth scene id per step (retained for oracle checks)."""
    return [scene for _, _, scene in generate_labeled(spec)]


def generate_labeled(spec: StreamSpec):
    """Yield (low, high, scene_id) triples for every step of the spec."""
    rng = _rng(spec)
    lh, lw = spec.grid_low
    side = _square_side(spec.pool_ratio, "pool_ratio")
    centroids = rng.normal(0.0, spec.scene_scale,
                           size=(spec.n_scenes, lh, lw, spec.dim))
    drift = rng.normal(0.0, 1.0, size=(spec.n_scenes, lh, lw, spec.dim))
    norms = np.sqrt(np.square(drift).sum(axis=(1, 2, 3), keepdims=True))
    drift = drift / np.maximum(norms, 1e-12)

    step = 0
    scene = 0
    while step < spec.n_steps:
        length = int(rng.integers(spec.scene_length_min,
                                  spec.scene_length_max + 1))
        for _ in range(length):
            if step >= spec.n_steps:
                return
            center = centroids[scene] + spec.drift_rate * step * drift[scene]
            low64 = center + rng.normal(0.0, spec.cluster_spread,
                                        size=center.shape)
            low = FeatureMap(frame_index=step, grid_h=lh, grid_w=lw,
                             dim=spec.dim, values=low64.astype(np.float32),
                             tier=Tier.LOW)
            up = np.repeat(np.repeat(low.values, side, axis=0), side, axis=1)
            high64 = up.astype(np.float64)
            if spec.detail_noise > 0.0:
                high64 = high64 + rng.normal(0.0, spec.detail_noise,
                                             size=high64.shape)
            high = FeatureMap(frame_index=step, grid_h=lh * side,
                              grid_w=lw * side, dim=spec.dim,
                              values=high64.astype(np.float32), tier=Tier.HIGH)
            yield low, high, scene
            step += 1
        scene = (scene + 1) % spec.n_scenes


def generate(spec: StreamSpec):
    """Yield (low, high) FeatureMap pairs for every step of the spec."""
    for low, high, _ in generate_labeled(spec):
        yield low, high


def pool_block_average(values: np.ndarray, side: int) -> np.ndarray:
    """Block-average spatial pooling (float64 math, float32 result)."""
    h, w, d = values.shape
    v = values.astype(np.float64).reshape(h // side, side, w // side, side, d)
    return v.mean(axis=(1, 3)).astype(np.float32)


def write_stream(pairs, low_path, high_path) -> int:
    """Persist a paired stream as two FVSB files; returns the step count."""
    lows, highs = [], []
    low_shape = high_shape = None
    for low, high in pairs:
        low_shape = (low.grid_h, low.grid_w, low.dim)
        high_shape = (high.grid_h, high.grid_w, high.dim)
        lows.append(low.flat32())
        highs.append(high.flat32())
    if low_shape is None:
        raise ConfigError("cannot write an empty stream without shapes")
    write_records(low_path, Tier.LOW, *low_shape, np.stack(lows))
    write_records(high_path, Tier.HIGH, *high_shape, np.stack(highs))
    return len(lows)


def ingest_file(low_path, high_path):
    """Stream (low, high) FeatureMap pairs from an FVSB file pair."""
    low_tier, lh, lw, ld, low_records = read_records(low_path)
    high_tier, hh, hw, hd, high_records = read_records(high_path)
    if low_tier is not Tier.LOW:
        raise ParseError(f"{low_path}: expected a low-tier file, got {low_tier}")
    if high_tier is not Tier.HIGH:
        raise ParseError(f"{high_path}: expected a high-tier file, got {high_tier}")
    if len(low_records) != len(high_records):
        raise ParseError(
            f"record count mismatch: {len(low_records)} low vs "
            f"{len(high_records)} high",
            record_index=min(len(low_records), len(high_records)))
    for i in range(len(low_records)):
        low = FeatureMap(frame_index=i, grid_h=lh, grid_w=lw, dim=ld,
                         values=low_records[i].reshape(lh, lw, ld), tier=Tier.LOW)
        high = FeatureMap(frame_index=i, grid_h=hh, grid_w=hw, dim=hd,
                          values=high_records[i].reshape(hh, hw, hd),
                          tier=Tier.HIGH)
        yield low, high
