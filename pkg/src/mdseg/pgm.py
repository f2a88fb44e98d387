"""Binary PGM (P5, 8-bit) reading and writing.

The only image format the package touches: single-channel, maxval 255.
Images map to float [0,1] on read; masks are written as {0, 255}.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError, FilesystemError


def write_pgm(path, image: np.ndarray) -> None:
    """Write a uint8 array, or a float array in [0,1] (scaled to 0..255)."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise DataError(f"PGM wants a 2-d array, got shape {image.shape}")
    if image.dtype != np.uint8:
        if image.min() < 0 or image.max() > 1:
            raise DataError("float image must lie in [0,1] for PGM export")
        image = np.floor(image * 255.0 + 0.5).astype(np.uint8)
    h, w = image.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    try:
        Path(path).write_bytes(header + image.tobytes())
    except OSError as e:
        raise FilesystemError(f"cannot write {path}: {e}") from e


def write_mask_pgm(path, mask: np.ndarray) -> None:
    """Binary mask as {0, 255}."""
    mask = np.asarray(mask)
    write_pgm(path, np.where(mask != 0, 255, 0).astype(np.uint8))


def _tokenize_header(buf: bytes, path) -> tuple[list[bytes], int]:
    """First four whitespace-separated tokens, skipping # comments."""
    tokens = []
    i = 0
    while len(tokens) < 4:
        if i >= len(buf):
            raise DataError(f"{path}: truncated PGM header")
        c = buf[i : i + 1]
        if c == b"#":
            while i < len(buf) and buf[i : i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            start = i
            while i < len(buf) and not buf[i : i + 1].isspace():
                i += 1
            tokens.append(buf[start:i])
    return tokens, i + 1  # single whitespace after maxval precedes the raster


def read_pgm(path) -> np.ndarray:
    """Read a P5 PGM into a uint8 array."""
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise FilesystemError(f"cannot read {path}: {e}") from e
    tokens, data_start = _tokenize_header(buf, path)
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"{path}: non-numeric PGM header fields") from None
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 supported, got {maxval}")
    raster = buf[data_start : data_start + w * h]
    if len(raster) != w * h:
        raise DataError(f"{path}: raster holds {len(raster)} bytes, "
                        f"expected {w * h}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w)


def read_image(path) -> np.ndarray:
    """Grayscale image as float32 in [0,1]."""
    return read_pgm(path).astype(np.float32) / 255.0


def read_mask(path) -> np.ndarray:
    """Binary mask as uint8 {0,1}; any nonzero byte counts as object."""
    return (read_pgm(path) != 0).astype(np.uint8)
