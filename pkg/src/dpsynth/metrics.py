"""Image quality metrics: PSNR, MAE, SSIM, 2-D NCC, multi-scale edge loss.

All metrics expect values in [0, 1]. RGB inputs are scored per channel
and averaged, except SSIM which runs on the channel mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np
from scipy.signal import fftconvolve

from .imgcore import Image

PSNR_CAP_DB = 100.0


def _as_array(x) -> np.ndarray:
    data = x.data if isinstance(x, Image) else np.asarray(x, dtype=np.float64)
    return data[:, :, None] if data.ndim == 2 else data


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")


def mse(a, b) -> float:
    a, b = _as_array(a), _as_array(b)
    _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def mae(a, b) -> float:
    """Mean absolute difference over all samples."""
    a, b = _as_array(a), _as_array(b)
    _check_pair(a, b)
    return float(np.mean(np.abs(a - b)))


def psnr(a, b, cap: float = PSNR_CAP_DB) -> float:
    """10*log10(1/MSE) on [0, 1] data, capped (identical images hit the cap)."""
    err = mse(a, b)
    if err == 0.0:
        return cap
    return min(10.0 * math.log10(1.0 / err), cap)


@lru_cache(maxsize=8)
def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, window_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity with a Gaussian window over valid positions.

    Uses the conventional constants C1 = (k1*L)^2, C2 = (k2*L)^2 with
    L = 1 for [0, 1] data. RGB inputs are collapsed to their channel mean.
    """
    a, b = _as_array(a), _as_array(b)
    _check_pair(a, b)
    x = a.mean(axis=2)
    y = b.mean(axis=2)
    if min(x.shape) < window_size:
        raise ValueError(f"image {x.shape} smaller than SSIM window {window_size}")
    w = _gaussian_window(window_size, sigma)
    c1 = k1 ** 2
    c2 = k2 ** 2
    mu_x = fftconvolve(x, w, mode="valid")
    mu_y = fftconvolve(y, w, mode="valid")
    xx = fftconvolve(x * x, w, mode="valid") - mu_x ** 2
    yy = fftconvolve(y * y, w, mode="valid") - mu_y ** 2
    xy = fftconvolve(x * y, w, mode="valid") - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


def ncc2d(a, b) -> float:
    """Zero-mean normalized cross-correlation at zero lag, in [-1, 1].

    Zero-variance inputs score 1 when both are constant and equal,
    otherwise 0.
    """
    a, b = _as_array(a), _as_array(b)
    _check_pair(a, b)
    va = a - a.mean()
    vb = b - b.mean()
    na = float(np.sum(va * va))
    nb = float(np.sum(vb * vb))
    if na == 0.0 or nb == 0.0:
        if na == 0.0 and nb == 0.0:
            return 1.0 if float(a.mean()) == float(b.mean()) else 0.0
        return 0.0
    return float(np.clip(np.sum(va * vb) / math.sqrt(na * nb), -1.0, 1.0))


# ---------------------------------------------------------------------------
# Multi-scale Sobel edge loss
# ---------------------------------------------------------------------------

def _binomial_row(order: int) -> np.ndarray:
    return np.array([math.comb(order, i) for i in range(order + 1)], dtype=np.float64)


@lru_cache(maxsize=16)
def sobel_kernel(size: int, axis: str) -> np.ndarray:
    """Extended Sobel operator of odd size, unit response on a unit ramp.

    Built from the separable smoothing/derivative construction: the 1-D
    derivative [1, 0, -1] widened by binomial smoothing, crossed with a
    binomial smoothing column. Normalized so correlating with a ramp of
    slope one along the derivative axis yields exactly one.
    """
    if size < 3 or size % 2 == 0:
        raise ValueError(f"Sobel size must be odd and >= 3, got {size}")
    if axis not in ("x", "y"):
        raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")
    deriv = np.convolve(np.array([1.0, 0.0, -1.0]), _binomial_row(size - 3))
    smooth = _binomial_row(size - 1)
    kernel = np.outer(smooth, deriv)  # derivative along x
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    ramp_response = float(np.sum(kernel * offsets[None, :]))
    kernel = kernel / abs(ramp_response)
    if axis == "y":
        kernel = kernel.T
    return kernel


@dataclass(frozen=True)
class EdgeLossConfig:
    """Sobel scales and per-direction weights for the edge loss."""

    scales: tuple[int, ...] = (3, 7, 11)
    lambda_x: float = 0.03
    lambda_y: float = 0.02

    def __post_init__(self):
        for m in self.scales:
            if m < 3 or m % 2 == 0:
                raise ValueError(f"edge loss scales must be odd and >= 3, got {m}")


class EdgeLoss(NamedTuple):
    total: float
    mse: float
    grad_x: float
    grad_y: float


def edge_loss(out, gt, cfg: EdgeLossConfig = EdgeLossConfig()) -> EdgeLoss:
    """MSE plus weighted multi-scale Sobel gradient MSE per direction.

    Per scale the two images are convolved with the x and y Sobel
    operators (valid region only, so frame borders cannot fake edges) and
    the squared differences are averaged over scales per direction:
    total = mse + lambda_x * grad_x + lambda_y * grad_y.
    """
    a, b = _as_array(out), _as_array(gt)
    _check_pair(a, b)
    base = float(np.mean((a - b) ** 2))
    per_dir = {"x": [], "y": []}
    for m in cfg.scales:
        if min(a.shape[:2]) < m:
            raise ValueError(f"image {a.shape[:2]} smaller than Sobel scale {m}")
        for axis in ("x", "y"):
            k = sobel_kernel(m, axis)[:, :, None]
            ga = fftconvolve(a, k, mode="valid")
            gb = fftconvolve(b, k, mode="valid")
            per_dir[axis].append(float(np.mean((ga - gb) ** 2)))
    gx = float(np.mean(per_dir["x"]))
    gy = float(np.mean(per_dir["y"]))
    return EdgeLoss(total=base + cfg.lambda_x * gx + cfg.lambda_y * gy,
                    mse=base, grad_x=gx, grad_y=gy)
