"""Core raster types, PNG/PFM I/O, and sampling primitives.

Images are float64 arrays of shape (height, width, channels) with values
in [0, 1], row-major, top-left origin, +x right, +y down. Depth maps are
(height, width) arrays of strictly positive distances in meters. Both are
immutable after construction and safe to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np


class ImageIOError(RuntimeError):
    """Raised for unreadable, malformed, or unsupported raster files."""


@dataclass(frozen=True)
class Image:
    """Floating-point raster, 1 or 3 channels, samples in [0, 1]."""

    data: np.ndarray  # (h, w, c) float64

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"image must be (h, w, 1|3), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite samples")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def clamped(self) -> "Image":
        """Copy with samples clipped to [0, 1]."""
        return Image(np.clip(self.data, 0.0, 1.0))


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel scene distance in meters, strictly positive and finite."""

    data: np.ndarray  # (h, w) float64

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        if arr.ndim != 2:
            raise ValueError(f"depth map must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("depth map contains non-finite values")
        if np.any(arr <= 0):
            raise ValueError("depth map contains non-positive distances")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Kernel2D:
    """Square convolution kernel with odd side length and finite taps."""

    taps: np.ndarray  # (side, side) float64

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.taps, dtype=np.float64))
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"kernel must be square, got shape {arr.shape}")
        if arr.shape[0] % 2 == 0:
            raise ValueError(f"kernel side must be odd, got {arr.shape[0]}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("kernel contains non-finite taps")
        arr.setflags(write=False)
        object.__setattr__(self, "taps", arr)

    @property
    def size(self) -> int:
        return self.taps.shape[0]

    @property
    def center(self) -> tuple[int, int]:
        """(x_o, y_o) index of the geometric center tap."""
        half = self.taps.shape[0] // 2
        return (half, half)

    def mass(self) -> float:
        return float(self.taps.sum())


# ---------------------------------------------------------------------------
# PNG
# ---------------------------------------------------------------------------

def load_image(path, bit_depth_hint: int | None = None) -> Image:
    """Load an 8/16-bit PNG or a PFM float raster as an Image in [0, 1].

    Integer formats are scaled by their max code value (255 or 65535).
    PFM data passes through clamped to [0, 1]. `bit_depth_hint` is only
    consulted to sanity-check PNG files, it never rescales data.
    """
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        arr, _ = read_pfm(path)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        return Image(np.clip(arr.astype(np.float64), 0.0, 1.0))

    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageIOError(f"cannot read image: {path}")
    if raw.ndim == 3 and raw.shape[2] == 4:  # drop alpha
        raw = raw[:, :, :3]
    if raw.ndim == 3 and raw.shape[2] == 3:
        raw = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    elif raw.ndim != 2:
        raise ImageIOError(f"unsupported channel count in {path}: shape {raw.shape}")

    if raw.dtype == np.uint8:
        depth = 8
        scale = 255.0
    elif raw.dtype == np.uint16:
        depth = 16
        scale = 65535.0
    else:
        raise ImageIOError(f"unsupported sample type {raw.dtype} in {path}")
    if bit_depth_hint is not None and bit_depth_hint != depth:
        raise ImageIOError(f"{path}: expected {bit_depth_hint}-bit, file is {depth}-bit")
    return Image(raw.astype(np.float64) / scale)


def save_image(img: Image, path, bit_depth: int = 8) -> None:
    """Write an Image as 8- or 16-bit PNG (round half up quantization)."""
    if bit_depth == 8:
        maxcode, dtype = 255.0, np.uint8
    elif bit_depth == 16:
        maxcode, dtype = 65535.0, np.uint16
    else:
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")
    codes = np.floor(np.clip(img.data, 0.0, 1.0) * maxcode + 0.5).astype(dtype)
    if codes.shape[2] == 1:
        out = codes[:, :, 0]
    else:
        out = cv2.cvtColor(codes, cv2.COLOR_RGB2BGR)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), out):
        raise ImageIOError(f"failed to write {path}")


def encode_png(img: Image, bit_depth: int = 8) -> bytes:
    """PNG-encode an Image to bytes without touching the filesystem."""
    if bit_depth == 8:
        codes = np.floor(np.clip(img.data, 0, 1) * 255.0 + 0.5).astype(np.uint8)
    elif bit_depth == 16:
        codes = np.floor(np.clip(img.data, 0, 1) * 65535.0 + 0.5).astype(np.uint16)
    else:
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")
    out = codes[:, :, 0] if codes.shape[2] == 1 else cv2.cvtColor(codes, cv2.COLOR_RGB2BGR)
    ok, buf = cv2.imencode(".png", out)
    if not ok:
        raise ImageIOError("PNG encoding failed")
    return buf.tobytes()


# ---------------------------------------------------------------------------
# PFM (portable float map)
# ---------------------------------------------------------------------------
# Header: "PF" (color) or "Pf" (gray), then "W H", then a scale whose sign
# encodes endianness (negative = little-endian). Scanlines are stored
# bottom-to-top, which we flip to our top-left-origin convention.

def read_pfm(path) -> tuple[np.ndarray, float]:
    """Read a PFM file. Returns (array (h, w) or (h, w, 3), abs(scale))."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic == b"PF":
            nchan = 3
        elif magic == b"Pf":
            nchan = 1
        else:
            raise ImageIOError(f"not a PFM file: {path}")
        dims = fh.readline().split()
        if len(dims) != 2:
            raise ImageIOError(f"malformed PFM header in {path}")
        width, height = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        endian = "<" if scale < 0 else ">"
        count = width * height * nchan
        payload = fh.read(count * 4)
        if len(payload) != count * 4:
            raise ImageIOError(f"truncated PFM payload in {path}")
        data = np.frombuffer(payload, dtype=endian + "f4").astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise ImageIOError(f"NaN or Inf sample in PFM {path}")
    shape = (height, width) if nchan == 1 else (height, width, 3)
    return data.reshape(shape)[::-1].copy(), abs(scale)


def write_pfm(path, array: np.ndarray, scale: float = 1.0) -> None:
    """Write a (h, w) or (h, w, 1|3) array as little-endian PFM."""
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim == 2:
        magic = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"PF"
    else:
        raise ImageIOError(f"cannot encode shape {arr.shape} as PFM")
    if not np.all(np.isfinite(arr)):
        raise ImageIOError("refusing to write non-finite samples to PFM")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(magic + b"\n")
        fh.write(f"{arr.shape[1]} {arr.shape[0]}\n".encode())
        fh.write(f"{-abs(scale)}\n".encode())
        fh.write(arr[::-1].astype("<f4").tobytes())


# ---------------------------------------------------------------------------
# Depth
# ---------------------------------------------------------------------------

def load_depth(path, scale: float = 1.0, format: str = "png16",
               zero_sentinel: float = 1000.0) -> DepthMap:
    """Load a depth map in meters.

    png16: per-pixel depth = raw 16-bit code * scale; codes of 0 (invalid
    in some renderer exports) are replaced by `zero_sentinel` meters.
    pfm: raw float values pass through; non-positive values are replaced
    by the sentinel the same way.
    """
    if scale <= 0:
        raise ValueError(f"depth scale must be positive, got {scale}")
    path = Path(path)
    if format == "png16":
        raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if raw is None:
            raise ImageIOError(f"cannot read depth image: {path}")
        if raw.ndim == 3:  # some exporters tile the code across channels
            raw = raw[:, :, 0]
        meters = raw.astype(np.float64) * scale
    elif format == "pfm":
        arr, _ = read_pfm(path)
        if arr.ndim == 3:
            arr = arr[:, :, 0]
        meters = arr.astype(np.float64) * (scale if scale != 1.0 else 1.0)
    else:
        raise ValueError(f"unknown depth format: {format!r}")
    if np.any(meters < 0):
        raise ImageIOError(f"negative depth after scaling in {path}")
    meters = np.where(meters <= 0, zero_sentinel, meters)
    return DepthMap(meters)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def bilinear_sample_grid(data: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of (h, w, c) data at sub-pixel coordinates.

    xs/ys are broadcastable coordinate arrays; out-of-bounds coordinates
    clamp to the edge. Returns an array of shape xs.shape + (c,).
    """
    h, w = data.shape[:2]
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    top = data[y0, x0] * (1.0 - fx) + data[y0, x1] * fx
    bot = data[y1, x0] * (1.0 - fx) + data[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def bilinear_sample(img: Image, x: float, y: float) -> np.ndarray:
    """Sample one sub-pixel location; returns a length-`channels` vector."""
    return bilinear_sample_grid(img.data, np.asarray(x, dtype=np.float64),
                                np.asarray(y, dtype=np.float64))
