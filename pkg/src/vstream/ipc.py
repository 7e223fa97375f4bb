"""Two-OS-process mode: a producer process streams paired feature records
over a local byte stream (pipe or socket) in the bank record format.

Wire layout: the low-tier FVSB header, then the high-tier header, then per
step one low record followed by one high record (fixed strides from the
headers). EOF is only legal at a step boundary.
"""

from __future__ import annotations

import multiprocessing
import os

import numpy as np

from .bank import HEADER_SIZE, pack_header, unpack_header
from .errors import ParseError
from .synth import StreamSpec, generate
from .types import FeatureMap, Tier


def write_frame_stream(pairs, fileobj) -> int:
    """Stream (low, high) pairs; returns the number of steps written."""
    steps = 0
    headers_done = False
    for low, high in pairs:
        if not headers_done:
            fileobj.write(pack_header(Tier.LOW, low.grid_h, low.grid_w, low.dim))
            fileobj.write(pack_header(Tier.HIGH, high.grid_h, high.grid_w,
                                      high.dim))
            headers_done = True
        fileobj.write(low.flat32().astype("<f4", copy=False).tobytes())
        fileobj.write(high.flat32().astype("<f4", copy=False).tobytes())
        steps += 1
    fileobj.flush()
    return steps


def _read_exact(fileobj, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = fileobj.read(n - got)
        if not chunk:
            break
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame_stream(fileobj):
    """Yield (low, high) FeatureMap pairs from a paired byte stream."""
    head = _read_exact(fileobj, 2 * HEADER_SIZE)
    if not head:
        return
    if len(head) < 2 * HEADER_SIZE:
        raise ParseError("truncated stream headers", byte_offset=len(head))
    low_tier, lh, lw, ld = unpack_header(head[:HEADER_SIZE], "<ipc-low>")
    high_tier, hh, hw, hd = unpack_header(head[HEADER_SIZE:], "<ipc-high>")
    if low_tier is not Tier.LOW or high_tier is not Tier.HIGH:
        raise ParseError(f"stream headers out of order: {low_tier}, {high_tier}")
    low_stride = lh * lw * ld * 4
    high_stride = hh * hw * hd * 4
    index = 0
    offset = 2 * HEADER_SIZE
    while True:
        raw = _read_exact(fileobj, low_stride + high_stride)
        if not raw:
            return
        if len(raw) < low_stride + high_stride:
            raise ParseError(f"truncated record pair {index}",
                             byte_offset=offset + len(raw), record_index=index)
        low_values = np.frombuffer(raw, dtype="<f4", count=lh * lw * ld)
        high_values = np.frombuffer(raw, dtype="<f4", offset=low_stride)
        yield (FeatureMap(index, lh, lw, ld, low_values.reshape(lh, lw, ld),
                          Tier.LOW),
               FeatureMap(index, hh, hw, hd, high_values.reshape(hh, hw, hd),
                          Tier.HIGH))
        offset += low_stride + high_stride
        index += 1


def _producer_main(spec: StreamSpec, write_fd: int):
    with os.fdopen(write_fd, "wb") as fh:
        write_frame_stream(generate(spec), fh)


def spawn_producer(spec: StreamSpec):
    """Fork a producer process; returns (readable fileobj, process)."""
    read_fd, write_fd = os.pipe()
    proc = multiprocessing.Process(target=_producer_main,
                                   args=(spec, write_fd), daemon=True)
    proc.start()
    os.close(write_fd)
    return os.fdopen(read_fd, "rb"), proc


def ingest_stream(engine, fileobj) -> int:
    """Feed a paired byte stream into a running engine; returns step count."""
    steps = 0
    for low, high in read_frame_stream(fileobj):
        engine.ingest_frame(low, high)
        steps += 1
    return steps
