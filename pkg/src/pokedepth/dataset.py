"""The ``DBPD`` binary container, train/test splitting and batch iteration.

File layout (all little-endian, floats are IEEE float32)::

    "DBPD"  u32 version  u32 count
    count x record:
        u32 height  u32 width
        f32[height*width*3]  rgb (row-major, channel last)
        f32[height*width]    sensor depth (0.0 = invalid)
        u32 g_row  u32 g_col  u8 y  f32 z
        u8 ground_truth_present
        if present:  f32[height*width] true depth,  u8[height*width] material codes
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterator, Sequence, TypeVar

import numpy as np

from .sim import PokeSample

MAGIC = b"DBPD"
VERSION = 1

T = TypeVar("T")


class DatasetFormatError(ValueError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class DimensionError(DatasetFormatError):
    pass


def record_size(height: int, width: int, ground_truth: bool) -> int:
    n = height * width
    size = 8 + 4 * n * 3 + 4 * n + 4 + 4 + 1 + 4 + 1
    if ground_truth:
        size += 4 * n + n
    return size


def write_dataset(samples: Sequence[PokeSample], path) -> None:
    if not samples:
        raise ValueError("refusing to write an empty dataset")
    h, w = samples[0].depth.shape
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", VERSION, len(samples))
    for i, s in enumerate(samples):
        if s.depth.shape != (h, w) or s.rgb.shape != (h, w, 3):
            raise DimensionError(f"sample {i} has dims {s.depth.shape}, expected {(h, w)}")
        buf += struct.pack("<II", h, w)
        buf += np.ascontiguousarray(s.rgb, dtype="<f4").tobytes()
        buf += np.ascontiguousarray(s.depth, dtype="<f4").tobytes()
        buf += struct.pack("<IIBf", s.g[0], s.g[1], s.y, s.z)
        if s.ground_truth is None:
            buf += b"\x00"
        else:
            if s.material is None:
                raise ValueError(f"sample {i} has ground-truth depth but no material map")
            buf += b"\x01"
            buf += np.ascontiguousarray(s.ground_truth, dtype="<f4").tobytes()
            buf += np.ascontiguousarray(s.material, dtype=np.uint8).tobytes()
    Path(path).write_bytes(bytes(buf))


def read_dataset(path) -> list[PokeSample]:
    """Load every record, or raise without returning anything."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}, not a DBPD dataset")
    if len(data) < 12:
        raise TruncatedFileError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: dataset version {version}, this reader supports {VERSION}")

    pos = 12
    samples = []
    dims = None
    for i in range(count):
        if pos + 8 > len(data):
            raise TruncatedFileError(f"{path}: truncated at record {i} of {count}")
        h, w = struct.unpack_from("<II", data, pos)
        if dims is None:
            dims = (h, w)
        elif (h, w) != dims:
            raise DimensionError(f"{path}: record {i} is {h}x{w}, earlier records are {dims[0]}x{dims[1]}")
        n = h * w
        base = record_size(h, w, False)
        if pos + base > len(data):
            raise TruncatedFileError(f"{path}: truncated at record {i} of {count}")
        off = pos + 8
        rgb = np.frombuffer(data, "<f4", n * 3, off).reshape(h, w, 3).astype(np.float32)
        off += 12 * n
        depth = np.frombuffer(data, "<f4", n, off).reshape(h, w).astype(np.float32)
        off += 4 * n
        row, col, y, z = struct.unpack_from("<IIBf", data, off)
        off += 13
        present = data[off]
        off += 1
        if present not in (0, 1):
            raise DatasetFormatError(f"{path}: record {i} has invalid ground-truth flag {present}")
        gt = mat = None
        if present:
            if off + 5 * n > len(data):
                raise TruncatedFileError(f"{path}: truncated at record {i} of {count}")
            gt = np.frombuffer(data, "<f4", n, off).reshape(h, w).astype(np.float32)
            mat = np.frombuffer(data, np.uint8, n, off + 4 * n).reshape(h, w).copy()
            off += 5 * n
        if not (row < h and col < w):
            raise DatasetFormatError(f"{path}: record {i} grasp pixel ({row}, {col}) outside {h}x{w}")
        samples.append(PokeSample(rgb=rgb, depth=depth, g=(row, col), y=y, z=z,
                                  ground_truth=gt, material=mat))
        pos = off
    if pos != len(data):
        raise DatasetFormatError(f"{path}: {len(data) - pos} bytes after the last of {count} records")
    return samples


def strip_ground_truth(samples: Sequence[PokeSample]) -> list[PokeSample]:
    return [PokeSample(s.rgb, s.depth, s.g, s.y, s.z) for s in samples]


def split(samples: Sequence[T], train_fraction: float = 0.9, seed: int = 0) -> tuple[list[T], list[T]]:
    """Shuffle with ``seed`` and cut into train/test; ``round(fraction * N)`` go to train."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must be in (0, 1)")
    n = len(samples)
    if n < 2:
        raise ValueError("need at least two samples to split")
    n_train = min(max(int(np.floor(train_fraction * n + 0.5)), 1), n - 1)
    order = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5B1])).permutation(n)
    return [samples[i] for i in order[:n_train]], [samples[i] for i in order[n_train:]]


def batches(items: Sequence[T], batch_size: int, epoch_seed: int) -> Iterator[list[T]]:
    """One epoch in a seeded random order; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(int(epoch_seed)).permutation(len(items))
    for start in range(0, len(items), batch_size):
        yield [items[i] for i in order[start:start + batch_size]]
