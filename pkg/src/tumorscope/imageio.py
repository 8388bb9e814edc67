"""Netpbm (PGM/PPM) reading and writing, binary and ASCII variants."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

PNM_SUFFIXES = {".pgm", ".ppm", ".pnm"}


class ImageDecodeError(ValueError):
    pass


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments.

    Returns the tokens and the offset just past the single whitespace byte that
    terminates the last one (where binary raster data starts).
    """
    out: list[bytes] = []
    i = 0
    n = len(data)
    while len(out) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not data[i:i + 1].isspace() and data[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise ImageDecodeError("truncated header")
        out.append(data[start:i])
    return out, i + 1


def decode_pnm(data: bytes) -> tuple[np.ndarray, int]:
    """Decode P2/P3/P5/P6 bytes into (HxW or HxWx3 uint array, maxval)."""
    magic = data[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise ImageDecodeError(f"not a PGM/PPM file (magic {magic!r})")
    channels = 3 if magic in (b"P3", b"P6") else 1
    try:
        (_, w, h, maxval), offset = _tokens(data, 4)
        width, height, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ImageDecodeError(f"bad header: {exc}") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ImageDecodeError(f"bad dimensions {width}x{height} or maxval {maxval}")
    count = width * height * channels
    if magic in (b"P5", b"P6"):
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raster = data[offset:offset + count * dtype.itemsize]
        if len(raster) < count * dtype.itemsize:
            raise ImageDecodeError("truncated raster")
        values = np.frombuffer(raster, dtype=dtype).astype(np.uint16)
    else:
        parts = data[offset - 1:].split()
        if len(parts) < count:
            raise ImageDecodeError("truncated raster")
        try:
            values = np.array([int(p) for p in parts[:count]], dtype=np.int64)
        except ValueError:
            raise ImageDecodeError("non-integer sample in ASCII raster") from None
    if values.max(initial=0) > maxval:
        raise ImageDecodeError("sample exceeds maxval")
    shape = (height, width, 3) if channels == 3 else (height, width)
    return values.reshape(shape), maxval


def read_pnm(path) -> tuple[np.ndarray, int]:
    return decode_pnm(Path(path).read_bytes())


def read_image(path) -> tuple[np.ndarray, int]:
    """PGM/PPM natively; other formats only when Pillow is installed."""
    path = Path(path)
    if path.suffix.lower() in PNM_SUFFIXES:
        return read_pnm(path)
    try:
        from PIL import Image
    except ImportError:
        raise ImageDecodeError(
            f"{path.name}: only PGM/PPM are supported without Pillow; convert first") from None
    try:
        with Image.open(path) as im:
            im = im.convert("L") if im.mode in ("L", "I", "I;16", "1", "P", "LA") else im.convert("RGB")
            return np.asarray(im), 255
    except Exception as exc:  # Pillow raises a zoo of types
        raise ImageDecodeError(f"{path.name}: {exc}") from None


def encode_pnm(pixels: np.ndarray, maxval: int = 255, binary: bool = True) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        magic = "P5" if binary else "P2"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = "P6" if binary else "P3"
    else:
        raise ValueError(f"cannot encode array of shape {pixels.shape}")
    if pixels.min(initial=0) < 0 or pixels.max(initial=0) > maxval:
        raise ValueError("pixel values outside [0, maxval]")
    h, w = pixels.shape[:2]
    header = f"{magic}\n{w} {h}\n{maxval}\n".encode("ascii")
    if binary:
        dtype = ">u2" if maxval > 255 else "u1"
        return header + np.ascontiguousarray(pixels, dtype=dtype).tobytes()
    rows = [" ".join(str(int(v)) for v in row.ravel()) for row in pixels]
    return header + ("\n".join(rows) + "\n").encode("ascii")


def write_pnm(path, pixels: np.ndarray, maxval: int = 255, binary: bool = True) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_pnm(pixels, maxval, binary))
    os.replace(tmp, path)


def to_uint8(values: np.ndarray) -> np.ndarray:
    """[0,1] floats -> rounded 0..255 bytes."""
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
