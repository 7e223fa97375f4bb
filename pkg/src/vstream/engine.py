"""Two-role runtime: a frame-handler thread that consolidates the stream and
a query path that serves snapshots with latency independent of stream length.

The frame handler owns all mutation: it appends both banks, applies the
synopsis update, and publishes an immutable (state, frame_count) cell by a
single reference swap. Queries read the latest published cell, run (cached)
key-frame retrieval pinned to that cell's watermark, and assemble the
interleaved snapshot. A query therefore never waits on ingest work beyond
the reference swap itself; backpressure is applied to the producer through a
bounded ingest queue instead.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
from dataclasses import dataclass

from .assembly import FlashMemorySnapshot, assemble
from .bank import FeatureBank
from .csm import ClusterState, add_singleton, csm_update, empty_state
from .dam import RetrievalCache, retrieve_key_frames
from .errors import LifecycleError, SequencingError, TierMismatchError
from .types import FeatureMap, MemoryConfig, Tier

log = logging.getLogger("vstream.engine")

_STOP = object()


@dataclass(frozen=True)
class LatencyReport:
    snapshot_acquire: float
    retrieval: float
    assembly: float

    @property
    def total(self) -> float:
        return self.snapshot_acquire + self.retrieval + self.assembly


@dataclass(frozen=True, eq=False)
class QueryResult:
    snapshot: FlashMemorySnapshot
    latency: LatencyReport


@dataclass(frozen=True, eq=False)
class _Published:
    state: ClusterState
    frame_count: int


class MetricsRegistry:
    """Thread-safe event collector with a JSON-lines export."""

    def __init__(self):
        self._lock = threading.Lock()
        self.events: list[dict] = []

    def log(self, event: str, **fields):
        record = {"event": event, **fields}
        with self._lock:
            self.events.append(record)

    def select(self, event: str) -> list[dict]:
        with self._lock:
            return [e for e in self.events if e["event"] == event]

    def to_jsonl(self, path, header: dict | None = None):
        with self._lock:
            rows = list(self.events)
        with open(path, "w") as fh:
            if header:
                fh.write(json.dumps({"event": "run_meta", **header}) + "\n")
            for row in rows:
                fh.write(json.dumps(row) + "\n")


class StreamEngine:
    """Engine handle shared between the producer and any number of queriers."""

    def __init__(self, config: MemoryConfig, bank_dir=None,
                 low_watermark=None, high_watermark=None):
        self.config = config
        h, w = config.grid_low
        hh, hw = config.grid_high
        self._low_bank = FeatureBank(Tier.LOW, h, w, config.dim,
                                     directory=bank_dir, watermark=low_watermark)
        self._high_bank = FeatureBank(Tier.HIGH, hh, hw, config.dim,
                                      directory=bank_dir, watermark=high_watermark)
        self._published = _Published(empty_state(h, w, config.dim), 0)
        self._publish_cond = threading.Condition()
        self._queue: queue.Queue = queue.Queue(maxsize=config.ingest_queue_size)
        self._cache = RetrievalCache(capacity=max(config.n_dam, 1))
        self._cache_lock = threading.Lock()
        self._next_index = 0
        self._thread = None
        self._started = False
        self._stopped = False
        self._failure = None
        self.metrics = MetricsRegistry()

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> "StreamEngine":
        if self._started:
            raise LifecycleError("engine already started")
        self._started = True
        self._thread = threading.Thread(target=self._frame_loop,
                                        name="vstream-frame-handler",
                                        daemon=True)
        self._thread.start()
        self.metrics.log("start", t=0, wall_ns=time.perf_counter_ns())
        log.debug("engine started")
        return self

    def stop(self):
        if not self._started or self._stopped:
            return
        self._queue.put(_STOP)
        self._thread.join()
        self._stopped = True
        self.metrics.log("stop", t=self._published.frame_count,
                         wall_ns=time.perf_counter_ns())
        self._low_bank.close()
        self._high_bank.close()
        log.debug("engine stopped at t=%d", self._published.frame_count)

    def __enter__(self):
        if not self._started:
            self.start()
        return self

    def __exit__(self, *exc):
        self.stop()

    # -- producer side -------------------------------------------------------

    def ingest_frame(self, low: FeatureMap, high: FeatureMap):
        self._check_alive()
        if low.tier is not Tier.LOW or high.tier is not Tier.HIGH:
            raise TierMismatchError(
                f"ingest expects (low, high), got ({low.tier}, {high.tier})")
        if low.frame_index != high.frame_index:
            raise SequencingError(
                f"pair mismatch: low frame {low.frame_index}, "
                f"high frame {high.frame_index}")
        if low.frame_index != self._next_index:
            raise SequencingError(
                f"expected frame {self._next_index}, got {low.frame_index}")
        if low.spatial_size != self.config.spatial_size_low:
            raise TierMismatchError(
                f"low map has {low.spatial_size} tokens, config expects "
                f"{self.config.spatial_size_low}")
        if high.spatial_size != self.config.spatial_size_high:
            raise TierMismatchError(
                f"high map has {high.spatial_size} tokens, config expects "
                f"{self.config.spatial_size_high}")
        self._next_index += 1
        self._queue.put((low, high))

    def ingest(self, pairs):
        for low, high in pairs:
            self.ingest_frame(low, high)

    def _frame_loop(self):
        state = self._published.state
        config = self.config
        while True:
            item = self._queue.get()
            if item is _STOP:
                return
            low, high = item
            started = time.perf_counter_ns()
            try:
                self._low_bank.append(low)
                self._high_bank.append(high)
                if state.count < config.n_csm:
                    state = add_singleton(state, low)
                else:
                    state = csm_update(state, low, config)
                cell = _Published(state, low.frame_index + 1)
                with self._publish_cond:
                    self._published = cell
                    self._publish_cond.notify_all()
                if config.eager_retrieval:
                    with self._cache_lock:
                        retrieve_key_frames(cell.state, self._low_bank,
                                            self._high_bank, config,
                                            cache=self._cache,
                                            upto=cell.frame_count)
                self.metrics.log("ingest", t=cell.frame_count,
                                 wall_ns=time.perf_counter_ns() - started)
            except Exception as exc:   # surfaced to callers via _check_alive
                log.exception("frame handler failed at t=%d", low.frame_index)
                with self._publish_cond:
                    self._failure = exc
                    self._publish_cond.notify_all()
                return

    # -- query side ---------------------------------------------------------

    def query(self) -> QueryResult:
        self._check_alive(for_query=True)
        t0 = time.perf_counter_ns()
        cell = self._published
        t1 = time.perf_counter_ns()
        with self._cache_lock:
            dam_state = retrieve_key_frames(cell.state, self._low_bank,
                                            self._high_bank, self.config,
                                            cache=self._cache,
                                            upto=cell.frame_count)
        t2 = time.perf_counter_ns()
        snapshot = assemble(cell.state, dam_state, self.config,
                            snapshot_frame_count=cell.frame_count)
        t3 = time.perf_counter_ns()
        self.metrics.log("query", t=cell.frame_count, wall_ns=t3 - t0,
                         tokens=snapshot.token_count)
        return QueryResult(snapshot, LatencyReport(
            snapshot_acquire=(t1 - t0) / 1e9,
            retrieval=(t2 - t1) / 1e9,
            assembly=(t3 - t2) / 1e9))

    # -- observation ---------------------------------------------------------

    @property
    def watermark(self) -> int:
        return self._published.frame_count

    def published(self) -> tuple[ClusterState, int]:
        cell = self._published
        return cell.state, cell.frame_count

    def banks(self) -> tuple[FeatureBank, FeatureBank]:
        return self._low_bank, self._high_bank

    def wait_for_frames(self, count: int, timeout: float = 30.0):
        deadline = time.monotonic() + timeout
        with self._publish_cond:
            while self._published.frame_count < count:
                if self._failure is not None:
                    raise LifecycleError("frame handler failed") from self._failure
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise TimeoutError(
                        f"watermark {self._published.frame_count} < {count} "
                        f"after {timeout}s")
                self._publish_cond.wait(remaining)

    def _check_alive(self, for_query: bool = False):
        if self._failure is not None:
            raise LifecycleError("frame handler failed") from self._failure
        if not self._started:
            raise LifecycleError("engine not started")
        if self._stopped:
            raise LifecycleError("engine already stopped")
        del for_query


def start(config: MemoryConfig, **kwargs) -> StreamEngine:
    """Create and start an engine (the operation-level entry point)."""
    return StreamEngine(config, **kwargs).start()


def ingest_frame(handle: StreamEngine, low: FeatureMap, high: FeatureMap):
    handle.ingest_frame(low, high)


def query(handle: StreamEngine) -> QueryResult:
    return handle.query()


def replay_synchronous(config: MemoryConfig, pairs, bank_dir=None,
                       low_watermark=None, high_watermark=None):
    """Apply the exact frame-handler code path inline, without threads.

    Returns (state, low_bank, high_bank). Used by the replay-equivalence
    checks: the async engine must publish byte-identical states at every
    watermark.
    """
    h, w = config.grid_low
    hh, hw = config.grid_high
    low_bank = FeatureBank(Tier.LOW, h, w, config.dim, directory=bank_dir,
                           watermark=low_watermark)
    high_bank = FeatureBank(Tier.HIGH, hh, hw, config.dim, directory=bank_dir,
                            watermark=high_watermark)
    state = empty_state(h, w, config.dim)
    for low, high in pairs:
        low_bank.append(low)
        high_bank.append(high)
        if state.count < config.n_csm:
            state = add_singleton(state, low)
        else:
            state = csm_update(state, low, config)
    return state, low_bank, high_bank
