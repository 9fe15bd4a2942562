"""Parametric dual-pixel PSF model and PSF banks.

The combined defocus PSF is a donut-depleted disk: a radial Butterworth
profile (rescaled to [beta, 1]) masked by an anti-aliased disk whose
radius matches the blur circle, then smoothed by a Gaussian and
normalized to unit mass. The left and right sub-aperture PSFs split the
combined kernel with a horizontal ramp mask M and its mirror, so that

    H_l = H * M,  H_r = flip(H_l),  H_l + H_r = H,  sum(H_l) = 1/2

hold by construction. The ramp direction follows the sign of the blur
radius: front focus (r > 0) decays to the right, back focus to the left.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy.signal import fftconvolve

from .imgcore import Kernel2D
from .optics import IN_FOCUS_RADIUS_PX


@dataclass(frozen=True)
class PsfParams:
    """Shape parameters plus the signed blur radius they are rendered at.

    n: Butterworth order. alpha: cutoff scale, cutoff = alpha * |r|.
    beta: center depletion floor in (0, 1]. kappa: Gaussian smoothing
    factor, sigma = kappa * |r|. radius: signed blur radius in pixels.
    """

    n: int
    alpha: float
    beta: float
    kappa: float
    radius: float

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"Butterworth order must be >= 1, got {self.n}")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"beta must be in (0, 1], got {self.beta}")
        if not 0.0 < self.kappa < 1.0:
            raise ValueError(f"kappa must be in (0, 1), got {self.kappa}")
        if self.alpha <= 0.0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")

    def shape_key(self) -> tuple:
        return (int(self.n), round(self.alpha, 9), round(self.beta, 9), round(self.kappa, 9))


@dataclass(frozen=True)
class DpPsf:
    """Left/right sub-aperture kernels plus their combined parent."""

    left: Kernel2D
    right: Kernel2D
    combined: Kernel2D
    params: PsfParams


def kernel_side(radius: float, kappa: float) -> int:
    """Odd side length containing the disk plus 3-sigma smoothing support."""
    r = abs(radius)
    if r < IN_FOCUS_RADIUS_PX:
        return 1
    return 2 * math.ceil(r * (1.0 + 3.0 * kappa)) + 1


def _radial_distance(size: int) -> np.ndarray:
    half = size // 2
    ax = np.arange(size, dtype=np.float64) - half
    return np.hypot(ax[None, :], ax[:, None])


def butterworth_2d(size: int, cutoff: float, order: int, floor: float) -> Kernel2D:
    """Radial Butterworth profile rescaled to [floor, 1] on a square grid.

    The raw profile (1 + (cutoff/rho)^(2*order))^-1 is 0 at the center tap
    and rises through 1/2 at rho = cutoff; the affine rescale maps it to
    [floor, 1] so the center keeps a positive depletion value.
    """
    if size % 2 == 0:
        raise ValueError(f"size must be odd, got {size}")
    if cutoff <= 0:
        raise ValueError(f"cutoff must be positive, got {cutoff}")
    rho = _radial_distance(size)
    with np.errstate(divide="ignore"):
        raw = 1.0 / (1.0 + (cutoff / rho) ** (2 * order))
    raw[size // 2, size // 2] = 0.0
    return Kernel2D(floor + (1.0 - floor) * raw)


def disk_kernel(size: int, radius: float, supersample: int = 4) -> Kernel2D:
    """Anti-aliased filled disk: boundary taps get fractional coverage."""
    if size % 2 == 0:
        raise ValueError(f"size must be odd, got {size}")
    half = size // 2
    # Subsample offsets symmetric about the tap center keep the disk
    # exactly flip-symmetric, which the left/right split relies on.
    sub = (np.arange(supersample) + 0.5) / supersample - 0.5
    ax = np.arange(size, dtype=np.float64) - half
    xs = ax[None, :, None, None] + sub[None, None, None, :]
    ys = ax[:, None, None, None] + sub[None, None, :, None]
    inside = (xs * xs + ys * ys) <= radius * radius
    coverage = inside.reshape(size, size, -1).mean(axis=2)
    return Kernel2D(coverage)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Unit-mass Gaussian truncated at 3 sigma and renormalized."""
    radius = max(1, math.ceil(3.0 * sigma))
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def make_combined_psf(p: PsfParams) -> Kernel2D:
    """Combined (both sub-apertures) PSF for the given parameters.

    Returns a 1x1 delta kernel when |radius| is under the in-focus
    threshold. Otherwise: Butterworth-rescaled profile masked by an
    anti-aliased disk, Gaussian-smoothed, normalized to unit mass.
    """
    r = abs(p.radius)
    if r < IN_FOCUS_RADIUS_PX:
        return Kernel2D(np.ones((1, 1)))
    size = kernel_side(p.radius, p.kappa)
    profile = butterworth_2d(size, cutoff=p.alpha * r, order=p.n, floor=p.beta)
    disk = disk_kernel(size, r)
    shaped = profile.taps * disk.taps
    smoothed = fftconvolve(shaped, gaussian_kernel(p.kappa * r), mode="same")
    smoothed = np.maximum(smoothed, 0.0)  # FFT round-off can dip below zero
    return Kernel2D(smoothed / smoothed.sum())


def ramp_mask(size: int, front_focus: bool) -> Kernel2D:
    """Horizontal ramp weight mask splitting a kernel into one sub-aperture.

    M(x) = clamp(0.5 - sgn * (x - x_o) / (2 * r_eff), 0, 1) with
    r_eff = (size - 1) / 2 and sgn = +1 for front focus, so the mask and
    its horizontal mirror sum to exactly 1 at every tap.
    """
    if size % 2 == 0:
        raise ValueError(f"size must be odd, got {size}")
    if size == 1:
        return Kernel2D(np.full((1, 1), 0.5))
    half = size // 2
    sgn = 1.0 if front_focus else -1.0
    x = np.arange(size, dtype=np.float64) - half
    row = np.clip(0.5 - sgn * x / (2.0 * half), 0.0, 1.0)
    return Kernel2D(np.tile(row, (size, 1)))


def split_dp_psf(p: PsfParams) -> DpPsf:
    """Build the combined PSF and split it into left/right halves."""
    combined = make_combined_psf(p)
    mask = ramp_mask(combined.size, front_focus=p.radius >= 0)
    left = combined.taps * mask.taps
    right = left[:, ::-1].copy()
    return DpPsf(left=Kernel2D(left), right=Kernel2D(right),
                 combined=combined, params=p)


# ---------------------------------------------------------------------------
# Bank
# ---------------------------------------------------------------------------

RADIUS_STEP_PX = 0.5  # bank quantization granularity for blur radii


def quantize_radius(radius: float) -> float:
    """Snap a signed radius to the bank's half-pixel grid."""
    return round(radius / RADIUS_STEP_PX) * RADIUS_STEP_PX


class PsfBank:
    """Memoized collection of DpPsf entries keyed by shape and radius.

    Entries built eagerly by build_bank() form the representative grid;
    lookups for radii between grid points snap to the half-pixel key and
    build missing entries on demand, so render workers can share one bank.
    """

    def __init__(self, kappa: float):
        self.kappa = kappa
        self._entries: dict[tuple, DpPsf] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def entries(self) -> list[DpPsf]:
        return list(self._entries.values())

    @staticmethod
    def _key(n: int, alpha: float, beta: float, radius_q: float) -> tuple:
        return (int(n), round(alpha, 9), round(beta, 9), int(round(radius_q / RADIUS_STEP_PX)))

    def psf_for(self, n: int, alpha: float, beta: float, radius: float) -> DpPsf:
        """Entry at the quantized radius, building and caching on miss."""
        rq = quantize_radius(radius)
        key = self._key(n, alpha, beta, rq)
        entry = self._entries.get(key)
        if entry is None:
            entry = split_dp_psf(PsfParams(n=n, alpha=alpha, beta=beta,
                                           kappa=self.kappa, radius=rq))
            self._entries[key] = entry
        return entry

    def lookup(self, n: int, alpha: float, beta: float, radius: float) -> DpPsf:
        """Exact lookup on the quantized key; KeyError if never built."""
        return self._entries[self._key(n, alpha, beta, quantize_radius(radius))]


def build_bank(n_grid, alpha_grid, beta_grid, kappa: float, radius_grid) -> PsfBank:
    """Build every (n, alpha, beta, radius) grid combination eagerly."""
    if not (len(n_grid) and len(alpha_grid) and len(beta_grid) and len(radius_grid)):
        raise ValueError("parameter grids must be nonempty")
    bank = PsfBank(kappa)
    for n, alpha, beta, radius in product(n_grid, alpha_grid, beta_grid, radius_grid):
        bank.psf_for(n, alpha, beta, radius)
    return bank
