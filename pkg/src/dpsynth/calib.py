"""Calibration stack: synthetic targets, PSF estimation, parameter fits.

Non-blind PSF estimation solves, for a known sharp patch S and its
blurred observation B,

    argmin_E  sum_i ||D_i(S * E - B)||^2 + ||S * E - B||^2 + lam * ||E||_1
    subject to E >= 0

with D_i the first and second order derivative filters. The solver is
projected proximal gradient: a gradient step on the smooth quadratic,
one-sided soft thresholding (which is the prox of the L1 term combined
with the nonnegativity projection), and backtracking if the objective
ever rises. Parameter and distortion-coefficient fits are brute-force
searches over bounded grids with deterministic tie-breaking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy.signal import fftconvolve

from .imgcore import Image, Kernel2D
from .lensfx import distort
from .metrics import ncc2d
from .psfbank import PsfParams, make_combined_psf
from .render import convolve2d


# ---------------------------------------------------------------------------
# Derivative operators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DerivativeSet:
    """First and second order finite-difference kernels, 3x3, centered."""

    d_x: Kernel2D
    d_y: Kernel2D
    d_xx: Kernel2D
    d_yy: Kernel2D
    d_xy: Kernel2D

    @property
    def all(self) -> tuple[Kernel2D, ...]:
        return (self.d_x, self.d_y, self.d_xx, self.d_yy, self.d_xy)


def derivative_kernels() -> DerivativeSet:
    dx_row = np.array([-0.5, 0.0, 0.5])
    dxx_row = np.array([1.0, -2.0, 1.0])
    z = np.zeros((3, 3))
    d_x = z.copy(); d_x[1, :] = dx_row
    d_y = z.copy(); d_y[:, 1] = dx_row
    d_xx = z.copy(); d_xx[1, :] = dxx_row
    d_yy = z.copy(); d_yy[:, 1] = dxx_row
    d_xy = np.outer(dx_row, dx_row)
    return DerivativeSet(Kernel2D(d_x), Kernel2D(d_y), Kernel2D(d_xx),
                         Kernel2D(d_yy), Kernel2D(d_xy))


# ---------------------------------------------------------------------------
# Calibration targets
# ---------------------------------------------------------------------------

def _grid_centers(grid: tuple[int, int], spacing: float, size: int) -> list[tuple[float, float]]:
    rows, cols = grid
    cx = (size - 1) / 2.0
    centers = []
    for i in range(rows):
        for j in range(cols):
            centers.append((cx + (j - (cols - 1) / 2.0) * spacing,
                            cx + (i - (rows - 1) / 2.0) * spacing))
    return centers


def make_disk_pattern(grid: tuple[int, int], disk_radius: float,
                      spacing: float, size: int, supersample: int = 8) -> Image:
    """White anti-aliased disks on black at regular grid positions."""
    canvas = np.zeros((size, size))
    sub = (np.arange(supersample) + 0.5) / supersample - 0.5
    for cx, cy in _grid_centers(grid, spacing, size):
        if (cx - disk_radius < -0.5 or cx + disk_radius > size - 0.5
                or cy - disk_radius < -0.5 or cy + disk_radius > size - 0.5):
            raise ValueError(f"disk at ({cx:.1f}, {cy:.1f}) overflows the {size}px frame")
        x0 = int(math.floor(cx - disk_radius - 1))
        x1 = int(math.ceil(cx + disk_radius + 1)) + 1
        y0 = int(math.floor(cy - disk_radius - 1))
        y1 = int(math.ceil(cy + disk_radius + 1)) + 1
        xs = np.arange(x0, x1, dtype=np.float64)
        ys = np.arange(y0, y1, dtype=np.float64)
        sx = xs[None, :, None, None] + sub[None, None, None, :] - cx
        sy = ys[:, None, None, None] + sub[None, None, :, None] - cy
        cover = ((sx * sx + sy * sy) <= disk_radius ** 2).reshape(
            len(ys), len(xs), -1).mean(axis=2)
        canvas[y0:y1, x0:x1] = np.maximum(canvas[y0:y1, x0:x1], cover)
    return Image(canvas[:, :, None])


def make_square_pattern(grid: tuple[int, int], square_side: float,
                        spacing: float, size: int) -> Image:
    """White axis-aligned squares on black; edge coverage is exact."""
    canvas = np.zeros((size, size))
    half = square_side / 2.0
    px = np.arange(size, dtype=np.float64)
    for cx, cy in _grid_centers(grid, spacing, size):
        if (cx - half < -0.5 or cx + half > size - 0.5
                or cy - half < -0.5 or cy + half > size - 0.5):
            raise ValueError(f"square at ({cx:.1f}, {cy:.1f}) overflows the {size}px frame")
        ox = np.clip(np.minimum(px + 0.5, cx + half) - np.maximum(px - 0.5, cx - half), 0.0, 1.0)
        oy = np.clip(np.minimum(px + 0.5, cy + half) - np.maximum(px - 0.5, cy - half), 0.0, 1.0)
        canvas = np.maximum(canvas, np.outer(oy, ox))
    return Image(canvas[:, :, None])


# ---------------------------------------------------------------------------
# Non-blind PSF estimation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PsfEstimate:
    kernel: Kernel2D
    residual: float     # final objective value
    iterations: int
    converged: bool
    objective_trace: tuple[float, ...] = ()


def _to_plane(x) -> np.ndarray:
    if isinstance(x, Image):
        if x.channels != 1:
            raise ValueError("PSF estimation expects single-channel patches")
        return x.data[:, :, 0]
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D patch, got shape {arr.shape}")
    return arr


def _conv_same(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    return fftconvolve(x, k, mode="same")


def _forward(sharp: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """S * E cropped to the patch size."""
    return fftconvolve(sharp, kernel, mode="same")


def _forward_adjoint(sharp: np.ndarray, resid: np.ndarray, ksize: int) -> np.ndarray:
    """Adjoint of E -> same(S * E) with respect to the kernel."""
    full = fftconvolve(resid, sharp[::-1, ::-1], mode="full")
    o = (ksize - 1) // 2
    sy = sharp.shape[0] - 1 - o
    sx = sharp.shape[1] - 1 - o
    return full[sy:sy + ksize, sx:sx + ksize]


def _weighted_residual(resid: np.ndarray, derivs: tuple[np.ndarray, ...]) -> np.ndarray:
    """(I + sum_i D_i^T D_i) applied to a residual patch."""
    out = resid.copy()
    for d in derivs:
        out += _conv_same(_conv_same(resid, d), d[::-1, ::-1])
    return out


def _objective(resid: np.ndarray, derivs, lam: float, kernel: np.ndarray) -> float:
    val = float(np.sum(resid ** 2))
    for d in derivs:
        val += float(np.sum(_conv_same(resid, d) ** 2))
    return val + lam * float(np.sum(kernel))  # kernel >= 0, so L1 = sum


def estimate_psf(sharp, blurred, kernel_size: int, l1_weight: float = 1e-3,
                 max_iters: int = 500, rel_tol: float = 1e-8) -> PsfEstimate:
    """Estimate the blur kernel relating a sharp patch to its blurred copy.

    Parameters
    ----------
    sharp, blurred : Image or 2-D array
        Same-size single-channel patches.
    kernel_size : int
        Odd side length of the estimated kernel.
    l1_weight : float
        Sparsity weight relative to the data-term scale (the absolute
        weight is l1_weight times the peak magnitude of the zero-kernel
        gradient).
    max_iters : int
        Iteration cap; the solve also stops when the relative objective
        change drops below rel_tol.
    """
    s = _to_plane(sharp)
    b = _to_plane(blurred)
    if s.shape != b.shape:
        raise ValueError(f"patch shapes differ: {s.shape} vs {b.shape}")
    if kernel_size % 2 == 0 or kernel_size < 1:
        raise ValueError(f"kernel_size must be odd and positive, got {kernel_size}")
    derivs = tuple(k.taps for k in derivative_kernels().all)

    grad0 = _forward_adjoint(s, _weighted_residual(b, derivs), kernel_size)
    lam = l1_weight * float(np.abs(grad0).max())

    # Largest eigenvalue of A^T W A by power iteration sets the step size.
    rng = np.random.default_rng(0)
    v = rng.standard_normal((kernel_size, kernel_size))
    v /= np.linalg.norm(v)
    lmax = 0.0
    for _ in range(30):
        gv = _forward_adjoint(s, _weighted_residual(_forward(s, v), derivs), kernel_size)
        nrm = float(np.linalg.norm(gv))
        if nrm == 0.0:
            break
        lmax = nrm
        v = gv / nrm
    if lmax == 0.0:  # blank sharp patch: the gradient vanishes everywhere
        kernel = np.zeros((kernel_size, kernel_size))
        obj = _objective(-b, derivs, lam, kernel)
        return PsfEstimate(Kernel2D(kernel), obj, 0, True, (obj,))

    step = 1.0 / (2.0 * lmax * 1.05)
    kernel = np.zeros((kernel_size, kernel_size))
    resid = -b
    obj = _objective(resid, derivs, lam, kernel)
    trace = [obj]
    iters = 0
    converged = False
    for iters in range(1, max_iters + 1):
        grad = 2.0 * _forward_adjoint(s, _weighted_residual(resid, derivs), kernel_size)
        for _ in range(30):
            cand = np.maximum(kernel - step * grad - step * lam, 0.0)
            cand_resid = _forward(s, cand) - b
            cand_obj = _objective(cand_resid, derivs, lam, cand)
            if cand_obj <= obj + 1e-12 * max(1.0, abs(obj)):
                break
            step *= 0.5  # backtrack: keep the objective nonincreasing
        rel_change = abs(obj - cand_obj) / max(1.0, abs(obj))
        kernel, resid, obj = cand, cand_resid, cand_obj
        trace.append(obj)
        if rel_change < rel_tol:
            converged = True
            break
    return PsfEstimate(Kernel2D(kernel), obj, iters, converged, tuple(trace))


# ---------------------------------------------------------------------------
# PSF parameter search
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamGrids:
    """Bounded search space for the PSF shape parameters."""

    n: tuple[int, ...]
    alpha: tuple[float, ...]
    beta: tuple[float, ...]
    kappa: tuple[float, ...]
    radius: tuple[float, ...]

    def __post_init__(self):
        for name in ("n", "alpha", "beta", "kappa", "radius"):
            vals = getattr(self, name)
            if len(vals) == 0:
                raise ValueError(f"grid {name!r} is empty")
            object.__setattr__(self, name, tuple(vals))

    def combinations(self):
        return product(self.n, self.alpha, self.beta, self.kappa, self.radius)


def default_shape_grids(radius: tuple[float, ...] = (10.0,)) -> ParamGrids:
    """Stock search grids: 48 shape combinations per radius."""
    return ParamGrids(n=(3, 6, 9), alpha=(0.4, 0.6, 0.8, 1.0),
                      beta=(0.1, 0.2, 0.3, 0.4), kappa=(0.14,), radius=radius)


def _embed_center(arr: np.ndarray, size: int) -> np.ndarray:
    if arr.shape[0] == size:
        return arr
    out = np.zeros((size, size))
    off = (size - arr.shape[0]) // 2
    out[off:off + arr.shape[0], off:off + arr.shape[1]] = arr
    return out


def fit_psf_params(estimate, grids: ParamGrids) -> tuple[PsfParams, float]:
    """Brute-force search for the model parameters closest to a kernel.

    The distance is the summed squared derivative-domain residual between
    the (unit-mass) kernel and each candidate model PSF, evaluated on a
    common centered support. Ties break toward the lexicographically
    smallest (n, alpha, beta, kappa, radius).
    """
    e = estimate.taps if isinstance(estimate, Kernel2D) else np.asarray(estimate, dtype=np.float64)
    total = float(e.sum())
    if total > 0:
        e = e / total
    derivs = tuple(k.taps for k in derivative_kernels().all)
    best = None
    for n, alpha, beta, kappa, radius in grids.combinations():
        params = PsfParams(n=n, alpha=alpha, beta=beta, kappa=kappa, radius=radius)
        h = make_combined_psf(params).taps
        size = max(e.shape[0], h.shape[0])
        if size % 2 == 0:
            size += 1
        diff = _embed_center(e, size) - _embed_center(h, size)
        obj = 0.0
        for d in derivs:
            obj += float(np.sum(convolve2d(diff, d, method="direct") ** 2))
        key = (obj, n, alpha, beta, kappa, radius)
        if best is None or key < best[0]:
            best = (key, params)
    return best[1], best[0][0]


# ---------------------------------------------------------------------------
# Distortion coefficient search
# ---------------------------------------------------------------------------

def fit_distortion_coeffs(reference: Image, pattern: Image,
                          grids: tuple) -> tuple[tuple[float, float, float], float]:
    """Brute-force the division-model coefficients matching a reference.

    Each (c1, c2, c3) from the per-coefficient grids distorts the clean
    pattern; the triple whose result has the highest zero-lag normalized
    cross-correlation with the reference wins. Ties break toward the
    smallest triple.
    """
    if (reference.height, reference.width) != (pattern.height, pattern.width):
        raise ValueError("reference and pattern dimensions differ")
    c1_grid, c2_grid, c3_grid = grids
    best = None
    for c1, c2, c3 in product(c1_grid, c2_grid, c3_grid):
        candidate = distort(pattern, (c1, c2, c3))
        score = ncc2d(candidate, reference)
        key = (-score, c1, c2, c3)
        if best is None or key < best[0]:
            best = (key, (float(c1), float(c2), float(c3)), score)
    return best[1], best[2]
