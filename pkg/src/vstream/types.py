"""Domain types, configuration, and numeric conventions shared by all modules.

Conventions used throughout the engine:

* Feature maps are stored as float32 (the storage precision); every distance,
  mean, and centroid is computed in float64.
* A feature map is compared as a flattened vector of length
  ``grid_h * grid_w * dim`` (row-major, channel fastest).
* ``frame_index`` counts post-pooling steps; one (low, high) pair arrives per
  step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvalidFeatureError


class Tier(Enum):
    LOW = "low"
    HIGH = "high"


class ClusteringPolicy(Enum):
    KMEANS = "kmeans"
    DBSCAN = "dbscan"
    GMM = "gmm"
    NEIGHBOR_MERGE = "neighbor_merge"
    NEIGHBOR_DROP = "neighbor_drop"
    UNIFORM = "uniform"


class RetrievalPolicy(Enum):
    EUCLIDEAN = "euclidean"
    COSINE = "cosine"
    TEMPORAL = "temporal"


class SelectionPolicy(Enum):
    LARGEST = "largest"
    SMALLEST = "smallest"
    UNIFORM = "uniform"


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """One frame's embedding grid; the atom of the stream.

    ``values`` has shape ``(grid_h, grid_w, dim)``, dtype float32, and is
    flagged read-only after construction.
    """

    frame_index: int
    grid_h: int
    grid_w: int
    dim: int
    values: np.ndarray
    tier: Tier

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.shape != (self.grid_h, self.grid_w, self.dim):
            raise InvalidFeatureError(
                f"values shape {v.shape} != ({self.grid_h}, {self.grid_w}, {self.dim})"
            )
        if self.frame_index < 0:
            raise InvalidFeatureError(f"negative frame_index {self.frame_index}")
        if not np.all(np.isfinite(v)):
            raise InvalidFeatureError(
                f"non-finite values in frame {self.frame_index}"
            )
        v = np.ascontiguousarray(v)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def spatial_size(self) -> int:
        return self.grid_h * self.grid_w

    def flat(self) -> np.ndarray:
        """Flattened float64 view used for all distance/mean computation."""
        return self.values.reshape(-1).astype(np.float64)

    def flat32(self) -> np.ndarray:
        return self.values.reshape(-1)


def feature_map(frame_index, values, tier) -> FeatureMap:
    """Build a FeatureMap, inferring the grid from a 3-D value array."""
    v = np.asarray(values, dtype=np.float32)
    if v.ndim != 3:
        raise InvalidFeatureError(f"expected 3-D values, got shape {v.shape}")
    h, w, d = v.shape
    return FeatureMap(frame_index=frame_index, grid_h=h, grid_w=w, dim=d,
                      values=v, tier=tier)


@dataclass(frozen=True)
class PositionTriplet:
    """Per-token multimodal rotary position index (time, height, width)."""

    n_t: float
    n_h: int
    n_w: int

    def __post_init__(self):
        if self.n_t < 0 or self.n_h < 0 or self.n_w < 0:
            raise InvalidFeatureError(f"negative position component: {self}")


def _grid_shape(spatial_size: int) -> tuple[int, int]:
    """Factor a token count into (h, w) with h the largest divisor <= sqrt."""
    if spatial_size <= 0:
        raise ConfigError(f"spatial size must be positive, got {spatial_size}")
    h = math.isqrt(spatial_size)
    while h > 1 and spatial_size % h != 0:
        h -= 1
    return h, spatial_size // h


def _square_side(ratio: int, name: str) -> int:
    side = math.isqrt(ratio)
    if side * side != ratio:
        raise ConfigError(f"{name} must be a perfect square, got {ratio}")
    return side


@dataclass(frozen=True)
class MemoryConfig:
    """Capacity, shape, and policy configuration for the memory engine.

    Defaults reproduce the reference configuration: 60 synopsis clusters of
    256 low-res tokens and 30 key frames of 1024 high-res tokens, merged 4:1
    into LLM tokens, for a total budget of 11520 tokens.
    """

    n_csm: int = 60
    n_dam: int = 30
    spatial_size_low: int = 256
    spatial_size_high: int = 1024
    dim: int = 64
    merger_ratio: int = 4
    pool_ratio: int = 4
    kmeans_max_iters: int = 10
    clustering_policy: ClusteringPolicy = ClusteringPolicy.KMEANS
    retrieval_policy: RetrievalPolicy = RetrievalPolicy.EUCLIDEAN
    selection_policy: SelectionPolicy = SelectionPolicy.LARGEST
    budget_limit: int = 12000
    rope_scale_target: str = "dam"   # "dam" = literal formula, "csm" = grid-aligned
    eager_retrieval: bool = False
    ingest_queue_size: int = 256
    policy_seed: int = 0

    def __post_init__(self):
        if self.n_csm < 0 or self.n_dam < 0:
            raise ConfigError("capacities must be non-negative")
        if self.n_dam > self.n_csm:
            raise ConfigError(
                f"n_dam ({self.n_dam}) may not exceed n_csm ({self.n_csm}): "
                "key-frame anchors are drawn from synopsis clusters"
            )
        if self.spatial_size_high != self.pool_ratio * self.spatial_size_low:
            raise ConfigError(
                f"spatial_size_high ({self.spatial_size_high}) != "
                f"pool_ratio ({self.pool_ratio}) x spatial_size_low "
                f"({self.spatial_size_low})"
            )
        if self.merger_ratio <= 0 or self.pool_ratio <= 0:
            raise ConfigError("merger_ratio and pool_ratio must be positive")
        if self.spatial_size_low % self.merger_ratio != 0:
            raise ConfigError(
                f"spatial_size_low ({self.spatial_size_low}) not divisible by "
                f"merger_ratio ({self.merger_ratio})"
            )
        if self.spatial_size_high % self.merger_ratio != 0:
            raise ConfigError(
                f"spatial_size_high ({self.spatial_size_high}) not divisible "
                f"by merger_ratio ({self.merger_ratio})"
            )
        if self.kmeans_max_iters < 1:
            raise ConfigError("kmeans_max_iters must be >= 1")
        if self.rope_scale_target not in ("dam", "csm"):
            raise ConfigError(
                f"rope_scale_target must be 'dam' or 'csm', "
                f"got {self.rope_scale_target!r}"
            )
        budget = self.token_budget()
        if budget > self.budget_limit:
            raise ConfigError(
                f"token budget {budget} exceeds limit {self.budget_limit}"
            )

    def token_budget(self) -> int:
        """Total LLM tokens of a full memory snapshot."""
        return (self.n_csm * (self.spatial_size_low // self.merger_ratio)
                + self.n_dam * (self.spatial_size_high // self.merger_ratio))

    @property
    def grid_low(self) -> tuple[int, int]:
        return _grid_shape(self.spatial_size_low)

    @property
    def grid_high(self) -> tuple[int, int]:
        return _grid_shape(self.spatial_size_high)

    @property
    def merger_side(self) -> int:
        return _square_side(self.merger_ratio, "merger_ratio")

    @property
    def pool_side(self) -> int:
        return _square_side(self.pool_ratio, "pool_ratio")

    def token_grid(self, grid_h: int, grid_w: int) -> tuple[int, int]:
        """LLM-token grid for a feature grid after spatial merging."""
        side = self.merger_side
        if grid_h % side != 0 or grid_w % side != 0:
            raise ConfigError(
                f"grid {grid_h}x{grid_w} not divisible by merger side {side}"
            )
        return grid_h // side, grid_w // side

    def spatial_size(self, tier: Tier) -> int:
        return self.spatial_size_low if tier is Tier.LOW else self.spatial_size_high

    def csm_ratio(self) -> float:
        """Fraction of the token budget allocated to the synopsis memory."""
        total = self.token_budget()
        if total == 0:
            return 0.0
        return self.n_csm * (self.spatial_size_low // self.merger_ratio) / total

    def with_updates(self, **kw) -> "MemoryConfig":
        return replace(self, **kw)


def token_budget(config: MemoryConfig) -> int:
    return config.token_budget()


def scaled_config(**overrides) -> MemoryConfig:
    """Desk-scale configuration for tests and benchmarks (small dims)."""
    base = dict(n_csm=8, n_dam=4, spatial_size_low=16, spatial_size_high=64,
                dim=8, merger_ratio=4, pool_ratio=4)
    base.update(overrides)
    return MemoryConfig(**base)


_CONFIG_PARSERS = {
    int: int,
    float: float,
    bool: lambda s: {"true": True, "false": False, "1": True, "0": False}[s.lower()],
    str: str,
    ClusteringPolicy: ClusteringPolicy,
    RetrievalPolicy: RetrievalPolicy,
    SelectionPolicy: SelectionPolicy,
}


def load_config(path) -> MemoryConfig:
    """Parse a flat key/value config document.

    Lines are ``key = value``; ``#`` starts a comment. Unknown keys are
    rejected with a ConfigError.
    """
    known = {f.name: f.type for f in fields(MemoryConfig)}
    # dataclass field types are stored as strings under "from __future__ import
    # annotations"; resolve them against this module's namespace.
    resolved = {}
    for name, tp in known.items():
        if isinstance(tp, str):
            tp = eval(tp, globals())  # noqa: S307 - module-local names only
        resolved[name] = tp
    values = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in resolved:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = _CONFIG_PARSERS[resolved[key]](value)
        except (ValueError, KeyError) as exc:
            raise ConfigError(
                f"{path}:{lineno}: bad value {value!r} for {key}: {exc}"
            ) from exc
    return MemoryConfig(**values)


def dump_config(config: MemoryConfig, path) -> None:
    lines = []
    for f in fields(MemoryConfig):
        value = getattr(config, f.name)
        if isinstance(value, Enum):
            value = value.value
        lines.append(f"{f.name} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


def config_as_dict(config: MemoryConfig) -> dict:
    out = {}
    for f in fields(MemoryConfig):
        value = getattr(config, f.name)
        out[f.name] = value.value if isinstance(value, Enum) else value
    return out
