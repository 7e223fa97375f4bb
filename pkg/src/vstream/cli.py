"""Operator entry point: simulate, ingest, query, bench, ablate, export-pca.

Every command is deterministic given its flags and seed, and every artifact
carries a provenance header (command, config, seed). Exit status is 0 only
if the run's embedded self-checks pass. ``VSTREAM_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from . import ipc
from .assembly import export_pca_csv, export_snapshot, load_snapshot
from .engine import StreamEngine
from .errors import EngineError
from .policies import bench_policies, capacity_grid
from .synth import StreamSpec, generate, ingest_file
from .types import (ClusteringPolicy, MemoryConfig, config_as_dict,
                    load_config, scaled_config)

log = logging.getLogger("vstream.cli")


def _setup_logging():
    level = os.environ.get("VSTREAM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _build_config(args) -> MemoryConfig:
    if getattr(args, "config", None):
        config = load_config(args.config)
    elif getattr(args, "paper_shapes", False):
        config = MemoryConfig()
    else:
        config = scaled_config()
    if getattr(args, "dim", None):
        config = config.with_updates(dim=args.dim)
    if getattr(args, "policy", None):
        config = config.with_updates(
            clustering_policy=ClusteringPolicy(args.policy))
    return config


def _stream_spec(args, config: MemoryConfig) -> StreamSpec:
    return StreamSpec(seed=args.seed, n_steps=args.steps,
                      spatial_size_low=config.spatial_size_low,
                      pool_ratio=config.pool_ratio, dim=config.dim,
                      n_scenes=getattr(args, "scenes", 3) or 3)


def _provenance(args, config: MemoryConfig) -> dict:
    return {"command": args.command, "seed": getattr(args, "seed", None),
            "config": config_as_dict(config)}


def _self_check(engine: StreamEngine, snapshot, expected_steps: int) -> list[str]:
    failures = []
    state, watermark = engine.published()
    if watermark != expected_steps:
        failures.append(f"watermark {watermark} != steps {expected_steps}")
    if state.count and state.total_weight != watermark:
        failures.append(
            f"weight conservation: {state.total_weight} != {watermark}")
    positions = snapshot.token_positions
    order = [(it.temporal_position, 0 if it.source == "csm" else 1, it.index)
             for it in snapshot.items]
    if order != sorted(order):
        failures.append("snapshot items not sorted by temporal position")
    if positions.shape[0] != snapshot.token_count:
        failures.append("token accounting mismatch")
    if snapshot.config.token_budget() > snapshot.config.budget_limit:
        failures.append("token budget exceeds limit")
    return failures


def _write_rows(rows: list[dict], args, provenance: dict):
    if args.format == "csv":
        out = args.out or "-"
        fh = sys.stdout if out == "-" else open(out, "w", newline="")
        try:
            fh.write("# " + json.dumps(provenance) + "\n")
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
        finally:
            if fh is not sys.stdout:
                fh.close()
    else:
        doc = {"provenance": provenance, "rows": rows}
        if args.out:
            with open(args.out, "w") as fh:
                json.dump(doc, fh, indent=2)
        else:
            json.dump(doc, sys.stdout, indent=2)
            sys.stdout.write("\n")


def _run_stream(engine: StreamEngine, args, config) -> int:
    spec = _stream_spec(args, config)
    if getattr(args, "ipc", False):
        reader, proc = ipc.spawn_producer(spec)
        try:
            steps = ipc.ingest_stream(engine, reader)
        finally:
            reader.close()
            proc.join()
        return steps
    engine.ingest(generate(spec))
    return spec.n_steps


def cmd_simulate(args) -> int:
    config = _build_config(args)
    engine = StreamEngine(config, bank_dir=args.bank_dir,
                          high_watermark=args.watermark).start()
    steps = _run_stream(engine, args, config)
    engine.wait_for_frames(steps, timeout=args.timeout)
    result = engine.query()
    engine.stop()
    snapshot = result.snapshot
    failures = _self_check(engine, snapshot, steps)
    provenance = _provenance(args, config)
    if args.out:
        export_snapshot(snapshot, args.out, provenance=provenance)
    if args.metrics:
        engine.metrics.to_jsonl(args.metrics, header=provenance)
    print(f"steps={steps} items={len(snapshot.items)} "
          f"tokens={snapshot.token_count} "
          f"budget={config.token_budget()} "
          f"query_seconds={result.latency.total:.6f}")
    for failure in failures:
        print(f"self-check failed: {failure}", file=sys.stderr)
    return 1 if failures else 0


def cmd_ingest(args) -> int:
    config = _build_config(args)
    engine = StreamEngine(config, bank_dir=args.bank_dir,
                          high_watermark=args.watermark).start()
    steps = 0
    for low, high in ingest_file(args.low, args.high):
        engine.ingest_frame(low, high)
        steps += 1
    engine.wait_for_frames(steps, timeout=args.timeout)
    result = engine.query()
    engine.stop()
    failures = _self_check(engine, result.snapshot, steps)
    if args.out:
        export_snapshot(result.snapshot, args.out,
                        provenance=_provenance(args, config))
    print(f"steps={steps} items={len(result.snapshot.items)} "
          f"tokens={result.snapshot.token_count}")
    for failure in failures:
        print(f"self-check failed: {failure}", file=sys.stderr)
    return 1 if failures else 0


def cmd_query(args) -> int:
    snapshot = load_snapshot(args.snapshot)
    order = [(it.temporal_position, 0 if it.source == "csm" else 1, it.index)
             for it in snapshot.items]
    ok = order == sorted(order) and \
        snapshot.token_positions.shape[0] == snapshot.token_count
    print(f"items={len(snapshot.items)} tokens={snapshot.token_count} "
          f"frames={snapshot.snapshot_frame_count} "
          f"sorted={'yes' if order == sorted(order) else 'no'}")
    return 0 if ok else 1


def cmd_bench(args) -> int:
    config = _build_config(args)
    steps_list = [int(s) for s in args.steps.split(",")]
    rows = []
    for t in steps_list:
        spec = StreamSpec(seed=args.seed, n_steps=t,
                          spatial_size_low=config.spatial_size_low,
                          pool_ratio=config.pool_ratio, dim=config.dim)
        engine = StreamEngine(config, bank_dir=args.bank_dir,
                              high_watermark=args.watermark).start()
        started = time.perf_counter()
        engine.ingest(generate(spec))
        engine.wait_for_frames(t, timeout=args.timeout)
        ingest_seconds = time.perf_counter() - started
        engine.query()   # warm retrieval caches
        latencies = []
        for _ in range(args.queries):
            latencies.append(engine.query().latency)
        engine.stop()
        rows.append({
            "steps": t,
            "ingest_seconds_per_step": ingest_seconds / t,
            "median_query_seconds": float(np.median(
                [l.total for l in latencies])),
            "median_snapshot_seconds": float(np.median(
                [l.snapshot_acquire for l in latencies])),
            "median_retrieval_seconds": float(np.median(
                [l.retrieval for l in latencies])),
            "median_assembly_seconds": float(np.median(
                [l.assembly for l in latencies])),
        })
    _write_rows(rows, args, _provenance(args, config))
    if len(rows) >= 2:
        ratio = rows[-1]["median_query_seconds"] / rows[0]["median_query_seconds"]
        print(f"query-time ratio (t={steps_list[-1]} vs t={steps_list[0]}): "
              f"{ratio:.3f}", file=sys.stderr)
    return 0


def cmd_ablate(args) -> int:
    config = _build_config(args)
    spec = _stream_spec(args, config)
    policies = [p.strip() for p in args.policies.split(",")]
    configs = None
    if args.grid:
        base = config
        configs = list(capacity_grid(base, [1 / 6, 1 / 3, 2 / 3], [1, 4, 16]))
    rows = [m.as_dict() for m in bench_policies(spec, policies, configs=configs)]
    _write_rows(rows, args, _provenance(args, config))
    return 0


def cmd_export_pca(args) -> int:
    config = _build_config(args)
    engine = StreamEngine(config).start()
    steps = _run_stream(engine, args, config)
    engine.wait_for_frames(steps, timeout=args.timeout)
    result = engine.query()
    low_bank, high_bank = engine.banks()
    rows = export_pca_csv(result.snapshot, low_bank, high_bank, args.out,
                          provenance=_provenance(args, config))
    engine.stop()
    expected = len(result.snapshot.items) + 2 * steps
    print(f"rows={rows} (items={len(result.snapshot.items)} frames={2 * steps})")
    return 0 if rows == expected else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vstream",
        description="streaming feature-map memory engine")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, steps_default=200, steps_type=int):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--steps", type=steps_type, default=steps_default)
        p.add_argument("--paper-shapes", action="store_true",
                       help="use the full-size memory configuration")
        p.add_argument("--policy", help="clustering policy name")
        p.add_argument("--watermark", type=int, default=None,
                       help="high-res bank offload watermark")
        p.add_argument("--bank-dir", default=None)
        p.add_argument("--dim", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--format", choices=("json", "csv"), default="json")
        p.add_argument("--timeout", type=float, default=600.0)

    p = sub.add_parser("simulate", help="run a synthetic stream, query at end")
    common(p)
    p.add_argument("--metrics", default=None, help="metrics JSONL path")
    p.add_argument("--scenes", type=int, default=3)
    p.add_argument("--ipc", action="store_true",
                   help="produce frames in a separate OS process")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ingest", help="ingest a precomputed FVSB file pair")
    p.add_argument("low", help="low-tier .fvsb file")
    p.add_argument("high", help="high-tier .fvsb file")
    common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("query", help="inspect and validate an exported snapshot")
    p.add_argument("snapshot")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("bench", help="latency vs stream length table")
    common(p, steps_default="1000,10000", steps_type=str)
    p.add_argument("--queries", type=int, default=50)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="policy metrics table")
    common(p)
    p.add_argument("--policies",
                   default="kmeans,dbscan,gmm,neighbor_merge,neighbor_drop,uniform")
    p.add_argument("--grid", action="store_true",
                   help="sweep the capacity-allocation grid")
    p.add_argument("--scenes", type=int, default=3)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-pca", help="CSV of memory items + frame features")
    common(p)
    p.add_argument("--scenes", type=int, default=3)
    p.set_defaults(func=cmd_export_pca)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "export-pca" and not args.out:
        parser.error("export-pca requires --out")
    try:
        return args.func(args)
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
