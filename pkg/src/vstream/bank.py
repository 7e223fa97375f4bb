"""Append-only per-frame feature store with watermark-based disk offload.

On-disk format (FVSB): a fixed 32-byte little-endian header
``{magic "FVSB", version u16, tier u8, grid_h u16, grid_w u16, dim u16,
reserved}`` followed by fixed-stride float32 little-endian records; frame i
lives at byte offset ``32 + i * stride``. The record count is derived from
the file size, which keeps the format append-friendly and O(1)-seekable.

Concurrency: a single writer appends; any number of readers may read
committed frames. A frame is written to disk (and flushed) before it is
dropped from the memory segment, and the committed count is published last,
so readers never observe a partial record. Reads take no locks.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import (NotFoundError, ParseError, SequencingError, StorageError,
                     TierMismatchError)
from .types import FeatureMap, Tier

MAGIC = b"FVSB"
VERSION = 1
HEADER_SIZE = 32
_HEADER = struct.Struct("<4sHBHHH")   # magic, version, tier, grid_h, grid_w, dim
_TIER_CODE = {Tier.LOW: 0, Tier.HIGH: 1}
_TIER_FROM = {0: Tier.LOW, 1: Tier.HIGH}


def pack_header(tier: Tier, grid_h: int, grid_w: int, dim: int) -> bytes:
    head = _HEADER.pack(MAGIC, VERSION, _TIER_CODE[tier], grid_h, grid_w, dim)
    return head.ljust(HEADER_SIZE, b"\0")


def unpack_header(raw: bytes, source="<stream>"):
    if len(raw) < HEADER_SIZE:
        raise ParseError(f"{source}: truncated header ({len(raw)} bytes)",
                         byte_offset=len(raw))
    magic, version, tier, grid_h, grid_w, dim = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ParseError(f"{source}: bad magic {magic!r}", byte_offset=0)
    if version != VERSION:
        raise ParseError(f"{source}: unsupported version {version}", byte_offset=4)
    if tier not in _TIER_FROM:
        raise ParseError(f"{source}: unknown tier code {tier}", byte_offset=6)
    if grid_h == 0 or grid_w == 0 or dim == 0:
        raise ParseError(f"{source}: zero grid dimension", byte_offset=7)
    return _TIER_FROM[tier], grid_h, grid_w, dim


def write_records(path, tier: Tier, grid_h: int, grid_w: int, dim: int,
                  records) -> None:
    """Write a complete FVSB file from flattened float32 records."""
    records = np.ascontiguousarray(records, dtype=np.float32)
    records = records.reshape(-1, grid_h * grid_w * dim)
    with open(path, "wb") as fh:
        fh.write(pack_header(tier, grid_h, grid_w, dim))
        fh.write(records.astype("<f4", copy=False).tobytes())


def read_records(path):
    """Read a complete FVSB file; returns (tier, h, w, dim, records)."""
    path = Path(path)
    raw = path.read_bytes()
    tier, grid_h, grid_w, dim = unpack_header(raw, source=str(path))
    stride = grid_h * grid_w * dim * 4
    body = len(raw) - HEADER_SIZE
    if body % stride != 0:
        raise ParseError(
            f"{path}: truncated record {body // stride} "
            f"({body % stride} trailing bytes)",
            byte_offset=HEADER_SIZE + (body // stride) * stride,
            record_index=body // stride)
    records = np.frombuffer(raw, dtype="<f4", offset=HEADER_SIZE)
    return tier, grid_h, grid_w, dim, records.reshape(-1, grid_h * grid_w * dim)


class FeatureBank:
    """Dense frame_index -> feature map store for one resolution tier.

    ``watermark`` bounds the memory-resident segment: once exceeded, the
    oldest frames spill to ``directory/<tier>.fvsb`` (oldest first, so the
    disk segment is always the prefix). ``watermark=None`` keeps everything
    in memory.
    """

    def __init__(self, tier: Tier, grid_h: int, grid_w: int, dim: int,
                 directory=None, watermark=None):
        if watermark is not None and directory is None:
            raise StorageError("offload watermark requires a directory")
        self.tier = tier
        self.grid_h, self.grid_w, self.dim = grid_h, grid_w, dim
        self.flat_len = grid_h * grid_w * dim
        self.stride = self.flat_len * 4
        self.watermark = watermark
        self.count = 0
        self._mem: dict[int, np.ndarray] = {}
        self._disk_count = 0
        self._path = None
        self._write_fh = None
        self._read_fd = None
        if directory is not None:
            directory = Path(directory)
            directory.mkdir(parents=True, exist_ok=True)
            self._path = directory / f"{tier.value}.fvsb"
            try:
                self._write_fh = open(self._path, "wb")
                self._write_fh.write(pack_header(tier, grid_h, grid_w, dim))
                self._write_fh.flush()
            except OSError as exc:
                raise StorageError(f"cannot create {self._path}: {exc}") from exc
            self._read_fd = os.open(self._path, os.O_RDONLY)

    # -- writer side ------------------------------------------------------

    def append(self, feature: FeatureMap) -> int:
        if feature.tier is not self.tier:
            raise TierMismatchError(
                f"bank holds {self.tier.value} maps, got {feature.tier.value}")
        if feature.frame_index != self.count:
            raise SequencingError(
                f"expected frame {self.count}, got {feature.frame_index}")
        if (feature.grid_h, feature.grid_w, feature.dim) != (
                self.grid_h, self.grid_w, self.dim):
            raise TierMismatchError(
                f"grid {feature.grid_h}x{feature.grid_w}x{feature.dim} does "
                f"not match bank {self.grid_h}x{self.grid_w}x{self.dim}")
        index = self.count
        self._mem[index] = feature.flat32()
        self.count = index + 1
        if self.watermark is not None:
            while len(self._mem) > self.watermark:
                self._offload_oldest()
        return index

    def _offload_oldest(self):
        index = self._disk_count
        vec = self._mem[index]
        try:
            self._write_fh.write(vec.astype("<f4", copy=False).tobytes())
            self._write_fh.flush()
        except OSError as exc:
            raise StorageError(f"offload of frame {index} failed: {exc}") from exc
        self._disk_count = index + 1
        del self._mem[index]

    def flush_to_disk(self):
        """Spill every in-memory frame (used by checkpointing)."""
        if self._path is None:
            raise StorageError("bank has no disk segment")
        while self._mem:
            self._offload_oldest()

    def close(self):
        if self._write_fh is not None:
            self._write_fh.close()
            self._write_fh = None
        if self._read_fd is not None:
            os.close(self._read_fd)
            self._read_fd = None

    # -- reader side (lock-free) -------------------------------------------

    def vector(self, frame_index: int) -> np.ndarray:
        """Flattened float32 record for one committed frame."""
        if frame_index >= self.count or frame_index < 0:
            raise NotFoundError(
                f"frame {frame_index} not in bank (count={self.count})")
        vec = self._mem.get(frame_index)
        if vec is not None:
            return vec
        return self._read_disk(frame_index)

    def _read_disk(self, frame_index: int) -> np.ndarray:
        offset = HEADER_SIZE + frame_index * self.stride
        raw = os.pread(self._read_fd, self.stride, offset)
        if len(raw) != self.stride:
            raise StorageError(
                f"short read of frame {frame_index}: {len(raw)} bytes")
        return np.frombuffer(raw, dtype="<f4")

    def read(self, frame_index: int) -> FeatureMap:
        vec = self.vector(frame_index)
        return FeatureMap(frame_index=frame_index, grid_h=self.grid_h,
                          grid_w=self.grid_w, dim=self.dim,
                          values=vec.reshape(self.grid_h, self.grid_w, self.dim),
                          tier=self.tier)

    def scan_chunks(self, upto: int, start: int = 0, chunk_size: int = 4096):
        """Yield (start_index, float64 matrix) blocks over frames [start, upto).

        Used by retrieval rescans; reads committed frames only and never
        blocks the writer.
        """
        if upto > self.count:
            raise NotFoundError(f"scan beyond committed count ({upto} > {self.count})")
        pos = start
        while pos < upto:
            end = min(pos + chunk_size, upto)
            disk_end = self._disk_count
            if end <= disk_end:
                raw = os.pread(self._read_fd, (end - pos) * self.stride,
                               HEADER_SIZE + pos * self.stride)
                block = np.frombuffer(raw, dtype="<f4").reshape(end - pos, -1)
            else:
                block = np.empty((end - pos, self.flat_len), dtype=np.float32)
                for i in range(pos, end):
                    block[i - pos] = self.vector(i)
            yield pos, block.astype(np.float64)
            pos = end

    def memory_resident(self) -> int:
        return len(self._mem)

    def on_disk(self) -> int:
        return self._disk_count
