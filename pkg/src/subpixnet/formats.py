"""Bit-exact readers/writers for .flo flow fields, PFM maps, and PPM/PGM images."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = [
    "FLO_MAGIC",
    "FormatError",
    "read_flo",
    "write_flo",
    "read_pfm",
    "write_pfm",
    "read_ppm",
    "write_ppm",
    "read_pgm",
    "write_pgm",
]

FLO_MAGIC = 202021.25


class FormatError(ValueError):
    """Raised for malformed or unsupported image/flow file contents."""


def read_flo(path) -> np.ndarray:
    """Read a Middlebury .flo file into a (2, h, w) float32 array (u, v)."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated .flo header ({len(raw)} bytes)")
    magic, width, height = struct.unpack("<fii", raw[:12])
    if magic != FLO_MAGIC:
        raise FormatError(f"{path}: bad .flo magic {magic!r}, expected {FLO_MAGIC}")
    if width < 1 or height < 1:
        raise FormatError(f"{path}: invalid .flo dimensions {width}x{height}")
    expected = 12 + 8 * width * height
    if len(raw) < expected:
        raise FormatError(f"{path}: truncated .flo payload ({len(raw)} < {expected} bytes)")
    data = np.frombuffer(raw, dtype="<f4", count=2 * width * height, offset=12)
    # interleaved (u, v) pairs, row-major
    return np.ascontiguousarray(data.reshape(height, width, 2).transpose(2, 0, 1))


def write_flo(flow: np.ndarray, path) -> None:
    """Write a (2, h, w) flow field as a Middlebury .flo file."""
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f"flow must be (2, h, w), got {flow.shape}")
    _, h, w = flow.shape
    interleaved = np.ascontiguousarray(flow.transpose(1, 2, 0))
    with open(path, "wb") as f:
        f.write(struct.pack("<fii", FLO_MAGIC, w, h))
        f.write(interleaved.astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a PFM file into (1, h, w) or (3, h, w) float32, top-to-bottom rows."""
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header == b"Pf":
            channels = 1
        elif header == b"PF":
            channels = 3
        else:
            raise FormatError(f"{path}: bad PFM header {header!r}")
        dims = f.readline().split()
        if len(dims) != 2:
            raise FormatError(f"{path}: bad PFM dimension line {dims!r}")
        try:
            w, h = int(dims[0]), int(dims[1])
        except ValueError as e:
            raise FormatError(f"{path}: non-integer PFM dimensions {dims!r}") from e
        if w < 1 or h < 1 or w * h > 10**9:
            raise FormatError(f"{path}: invalid PFM dimensions {w}x{h}")
        try:
            scale = float(f.readline().strip())
        except ValueError as e:
            raise FormatError(f"{path}: bad PFM scale line") from e
        if scale == 0.0:
            raise FormatError(f"{path}: PFM scale must be nonzero")
        dtype = "<f4" if scale < 0 else ">f4"
        count = w * h * channels
        payload = f.read(4 * count)
        if len(payload) != 4 * count:
            raise FormatError(f"{path}: truncated PFM payload")
    data = np.frombuffer(payload, dtype=dtype).astype(np.float32)
    if channels == 1:
        img = data.reshape(h, w)[::-1]  # rows are stored bottom-to-top
        return np.ascontiguousarray(img[None])
    img = data.reshape(h, w, 3)[::-1]
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def write_pfm(data: np.ndarray, path, little_endian: bool = True) -> None:
    """Write (1, h, w) or (3, h, w) float32 data as a PFM file (bottom-up rows)."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 3 or data.shape[0] not in (1, 3):
        raise ValueError(f"data must be (1, h, w) or (3, h, w), got {data.shape}")
    c, h, w = data.shape
    header = b"Pf" if c == 1 else b"PF"
    scale = -1.0 if little_endian else 1.0
    dtype = "<f4" if little_endian else ">f4"
    rows = data[0][::-1] if c == 1 else data.transpose(1, 2, 0)[::-1]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(f"{scale}\n".encode("ascii"))
        f.write(np.ascontiguousarray(rows).astype(dtype).tobytes())


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != magic:
            raise FormatError(f"{path}: expected {magic.decode()} file")
        fields: list[int] = []
        while len(fields) < 3:
            line = f.readline()
            if not line:
                raise FormatError(f"{path}: truncated header")
            line = line.split(b"#", 1)[0]
            for tok in line.split():
                try:
                    fields.append(int(tok))
                except ValueError as e:
                    raise FormatError(f"{path}: bad header token {tok!r}") from e
        w, h, maxval = fields[:3]
        if w < 1 or h < 1 or w * h > 10**9:
            raise FormatError(f"{path}: invalid dimensions {w}x{h}")
        if maxval != 255:
            raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
        count = w * h * channels
        payload = f.read(count)
        if len(payload) != count:
            raise FormatError(f"{path}: truncated payload")
    data = np.frombuffer(payload, dtype=np.uint8).astype(np.float32) / 255.0
    if channels == 1:
        return data.reshape(1, h, w)
    return np.ascontiguousarray(data.reshape(h, w, 3).transpose(2, 0, 1))


def _write_netpbm(img: np.ndarray, path, magic: bytes, channels: int) -> None:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 3 or img.shape[0] != channels:
        raise ValueError(f"image must be ({channels}, h, w), got {img.shape}")
    _, h, w = img.shape
    quant = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    body = quant[0] if channels == 1 else quant.transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(magic + b"\n")
        f.write(f"{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(body).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM (P6) into (3, h, w) float32 in [0, 1]."""
    return _read_netpbm(path, b"P6", 3)


def write_ppm(img: np.ndarray, path) -> None:
    """Write (3, h, w) float32 in [0, 1] as binary PPM, quantized by round(255 x)."""
    _write_netpbm(img, path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (P5) into (1, h, w) float32 in [0, 1]."""
    return _read_netpbm(path, b"P5", 1)


def write_pgm(img: np.ndarray, path) -> None:
    """Write (1, h, w) float32 in [0, 1] as binary PGM, quantized by round(255 x)."""
    _write_netpbm(img, path, b"P5", 1)
