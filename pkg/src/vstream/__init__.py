"""Streaming feature-map memory engine.

Maintains a fixed-budget, information-dense summary of an unbounded feature
stream: a synopsis memory of weighted cluster centroids over low-resolution
maps, a detail memory of retrieved high-resolution key frames, an
append-only feature bank with disk offload, and an asynchronous runtime
whose query latency does not grow with the stream.
"""

from .assembly import (FlashMemorySnapshot, MemoryItem, am_rope_triplets,
                       assemble, export_snapshot, load_snapshot,
                       snapshots_equal)
from .bank import FeatureBank, read_records, write_records
from .csm import (ClusterState, csm_init, csm_positions, csm_update,
                  csm_update_detail, state_fingerprint, states_equal,
                  weighted_lloyd)
from .dam import (DamEntry, DamState, RetrievalCache, rank_clusters,
                  retrieve_key_frames, retrieve_with_policy)
from .engine import (LatencyReport, MetricsRegistry, QueryResult,
                     StreamEngine, ingest_frame, query, replay_synchronous,
                     start)
from .errors import (BankIntegrityError, ConfigError, EngineError,
                     InvalidFeatureError, InvalidStateError, LifecycleError,
                     NotFoundError, ParseError, SequencingError, StorageError,
                     TierMismatchError)
from .policies import (ConsolidationPolicy, PolicyMetrics, bench_policies,
                       capacity_grid, consolidate_with, make_policy)
from .synth import StreamSpec, generate, generate_labeled, ingest_file, write_stream
from .types import (ClusteringPolicy, FeatureMap, MemoryConfig,
                    PositionTriplet, RetrievalPolicy, SelectionPolicy, Tier,
                    feature_map, load_config, scaled_config, token_budget)

__version__ = "0.1.0"
