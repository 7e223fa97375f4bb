#!/usr/bin/env python3
"""Query latency vs stream length.

Feeds one synthetic stream to increasing watermarks and measures the query
path (snapshot acquire / retrieval / assembly) with warm caches at each
checkpoint. The interesting output is the last column: the ratio of each
median to the first checkpoint's median, which should hover near 1.
"""

import argparse
import tempfile
import time

import numpy as np

from vstream import MemoryConfig, StreamSpec, generate, start


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--checkpoints", default="1000,10000,100000")
    ap.add_argument("--queries", type=int, default=50)
    ap.add_argument("--dim", type=int, default=64)
    args = ap.parse_args()

    checkpoints = [int(c) for c in args.checkpoints.split(",")]
    cfg = MemoryConfig(n_csm=16, n_dam=8, spatial_size_low=4,
                       spatial_size_high=16, dim=args.dim,
                       budget_limit=10 ** 9)
    spec = StreamSpec(seed=args.seed, n_steps=max(checkpoints),
                      spatial_size_low=4, pool_ratio=4, dim=args.dim,
                      n_scenes=6, scene_length_min=3, scene_length_max=8)

    print(f"{'t':>8} {'ingest_us':>10} {'snap_us':>8} {'retr_us':>8} "
          f"{'asm_us':>8} {'query_us':>9} {'ratio':>6}")
    with tempfile.TemporaryDirectory() as bank_dir:
        engine = start(cfg, bank_dir=bank_dir, low_watermark=8192,
                       high_watermark=4096)
        fed = 0
        baseline = None
        ingest_started = time.perf_counter()
        for low, high in generate(spec):
            engine.ingest_frame(low, high)
            fed += 1
            if fed in checkpoints:
                engine.wait_for_frames(fed)
                ingest_us = (time.perf_counter() - ingest_started) / fed * 1e6
                engine.query()   # warm retrieval caches
                reports = [engine.query().latency for _ in range(args.queries)]
                med = lambda f: float(np.median([f(r) for r in reports]))
                total = med(lambda r: r.total)
                baseline = baseline or total
                print(f"{fed:>8} {ingest_us:>10.1f} "
                      f"{med(lambda r: r.snapshot_acquire) * 1e6:>8.1f} "
                      f"{med(lambda r: r.retrieval) * 1e6:>8.1f} "
                      f"{med(lambda r: r.assembly) * 1e6:>8.1f} "
                      f"{total * 1e6:>9.1f} {total / baseline:>6.2f}")
        engine.stop()


if __name__ == "__main__":
    main()
