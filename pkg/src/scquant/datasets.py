"""Image dataset container format, synthetic image source, and CIFAR-10 ingestion.

The on-disk container ("SCQD") is a 24-byte header — magic, u32 version,
u32 count/channels/height/width — followed by the pixel payload as
little-endian 32-bit floats in [0, 1], image-major and channel-major within
each image. Sizes in the header must match the file length exactly; readers
reject anything else.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import DatasetFormatError
from .linalg import Rng
from .validation import check_positive_int

MAGIC = b"SCQD"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")

_CIFAR_RECORD = 3073  # 1 label byte + 32*32*3 pixel bytes
_CIFAR_TRAIN = [f"data_batch_{i}" for i in range(1, 6)]
_CIFAR_TEST = ["test_batch"]


def write_scqd(path, images: np.ndarray) -> None:
    """Serialize an (N, C, H, W) batch of [0, 1] pixels.

    Values are stored as 32-bit floats, so a read/re-write round trip is
    byte-identical.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise DatasetFormatError(f"expected an (N, C, H, W) batch, got shape {images.shape}")
    n, c, h, w = images.shape
    if images.size:
        if not np.isfinite(images).all():
            raise DatasetFormatError("pixel values must be finite")
        lo, hi = float(images.min()), float(images.max())
        if lo < 0.0 or hi > 1.0:
            raise DatasetFormatError(f"pixel values must lie in [0, 1], found [{lo}, {hi}]")
    payload = np.ascontiguousarray(images, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, c, h, w))
        fh.write(payload)


def read_scqd(path) -> np.ndarray:
    """Load an SCQD file back into a float64 (N, C, H, W) array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, n, c, h, w = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + n * c * h * w * 4
    if len(raw) != expected:
        raise DatasetFormatError(
            f"{path}: header declares {expected} bytes, file has {len(raw)}"
        )
    flat = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    images = flat.astype(np.float64).reshape(n, c, h, w)
    if images.size:
        if not np.isfinite(images).all():
            raise DatasetFormatError(f"{path}: payload contains non-finite values")
        if images.min() < 0.0 or images.max() > 1.0:
            raise DatasetFormatError(f"{path}: payload leaves the [0, 1] range")
    return images


def synthesize_images(n: int, size: int, rng: Rng) -> np.ndarray:
    """Seeded RGB toy images: flat background plus 1-3 solid shapes.

    Image ``i`` is drawn entirely from substream ``i`` of the given rng, so
    the first images of two datasets differing only in ``n`` coincide.
    """
    if n < 0:
        raise ValueError("image count cannot be negative")
    size = check_positive_int(size, "size")
    out = np.empty((n, 3, size, size))
    yy, xx = np.mgrid[0:size, 0:size]
    for i in range(n):
        sub = rng.substream(i)
        image = np.broadcast_to(sub.random(3)[:, None, None], (3, size, size)).copy()
        for _ in range(int(sub.integers(1, 4))):
            color = sub.random(3)
            kind = int(sub.integers(0, 2))
            if kind == 0:  # axis-aligned rectangle
                x0 = int(sub.integers(0, size))
                y0 = int(sub.integers(0, size))
                wdt = int(sub.integers(1, max(2, size // 2)))
                hgt = int(sub.integers(1, max(2, size // 2)))
                mask = (xx >= x0) & (xx < x0 + wdt) & (yy >= y0) & (yy < y0 + hgt)
            else:  # circle
                cx = int(sub.integers(0, size))
                cy = int(sub.integers(0, size))
                radius = int(sub.integers(1, max(2, size // 3)))
                mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2
            image[:, mask] = color[:, None]
        out[i] = image
    return out


def _cifar_paths(in_dir, names) -> list[str]:
    paths = []
    for name in names:
        for candidate in (name, name + ".bin"):
            path = os.path.join(in_dir, candidate)
            if os.path.isfile(path):
                paths.append(path)
                break
        else:
            raise DatasetFormatError(f"missing CIFAR-10 batch file {name}(.bin) in {in_dir}")
    return paths


def ingest_cifar(in_dir, split: str) -> np.ndarray:
    """Read the standard CIFAR-10 binary batches into a [0, 1] image array.

    Each record is one label byte (discarded) followed by 3072 pixel bytes,
    the red plane first, row-major 32x32. ``split`` selects the five training
    batches or the single test batch.
    """
    if split == "train":
        names = _CIFAR_TRAIN
    elif split == "test":
        names = _CIFAR_TEST
    else:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    chunks = []
    for path in _cifar_paths(in_dir, names):
        with open(path, "rb") as fh:
            raw = fh.read()
        if not raw or len(raw) % _CIFAR_RECORD:
            raise DatasetFormatError(
                f"{path}: length {len(raw)} is not a positive multiple of {_CIFAR_RECORD}"
            )
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
        chunks.append(records[:, 1:].reshape(-1, 3, 32, 32))
    pixels = np.concatenate(chunks, axis=0)
    return pixels.astype(np.float64) / 255.0
