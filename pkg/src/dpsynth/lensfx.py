"""Post-render camera artifacts: radial distortion and sensor noise.

Distortion uses the three-coefficient division model, mapping an
undistorted point u to its distorted position d through

    d = o + (u - o) / (1 + c1 R^2 + c2 R^4 + c3 R^6)

where o is the frame center and R is the radial distance of u from o,
normalized so the frame corner sits at R = 1 (coefficient magnitudes then
mean the same thing at any resolution). Rendering a distorted image needs
the inverse map, which has no closed form and is solved per pixel by
damped fixed-point iteration.

Noise is signal dependent: out = in + in * N with N zero-mean Gaussian of
standard deviation sigma, drawn from a counter-based generator so results
are reproducible regardless of tiling or scheduling.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .imgcore import Image, bilinear_sample_grid

log = logging.getLogger(__name__)

MAX_INVERT_ITERS = 20
INVERT_TOL_PX = 1e-6

# Representative coefficient triples covering barrel and pincushion cases,
# paired index-wise with the default camera sets.
DISTORTION_PRESETS: dict[str, tuple[float, float, float]] = {
    "set1": (2e-2, 2e-2, 3e-2),
    "set2": (8e-3, 2e-3, 2.2e-3),
    "set3": (-4e-3, 9e-4, -9e-4),
    "set4": (-7e-3, -3.8e-3, -3.6e-3),
    "set5": (-8e-3, -5e-3, -4.5e-3),
}


@dataclass(frozen=True)
class NoiseConfig:
    """Signal-dependent noise strength and the master RNG seed."""

    sigma: float
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


# ---------------------------------------------------------------------------
# Division-model distortion
# ---------------------------------------------------------------------------

def _center_and_norm(width: int, height: int) -> tuple[float, float, float]:
    cx = (width - 1) / 2.0
    cy = (height - 1) / 2.0
    corner = float(np.hypot(cx, cy))
    return cx, cy, corner if corner > 0 else 1.0


def _denominator(r2: np.ndarray, coeffs) -> np.ndarray:
    c1, c2, c3 = coeffs
    return 1.0 + r2 * (c1 + r2 * (c2 + r2 * c3))


def distort_coords(xu, yu, width: int, height: int, coeffs):
    """Forward model: undistorted pixel coordinates to distorted ones."""
    cx, cy, corner = _center_and_norm(width, height)
    dx = np.asarray(xu, dtype=np.float64) - cx
    dy = np.asarray(yu, dtype=np.float64) - cy
    r2 = (dx * dx + dy * dy) / (corner * corner)
    den = _denominator(r2, coeffs)
    return cx + dx / den, cy + dy / den


def undistort_coords(xd, yd, width: int, height: int, coeffs,
                     max_iters: int = MAX_INVERT_ITERS,
                     tol: float = INVERT_TOL_PX):
    """Invert the forward model per pixel by damped fixed-point iteration.

    Returns (xu, yu, converged). Starting from the distorted position,
    iterate u <- o + (d - o) * denom(R(u)). Pixels that fail to reach the
    tolerance keep the identity mapping and are flagged False.
    """
    cx, cy, corner = _center_and_norm(width, height)
    ddx = np.asarray(xd, dtype=np.float64) - cx
    ddy = np.asarray(yd, dtype=np.float64) - cy
    ux = ddx.copy()
    uy = ddy.copy()
    damping = 1.0
    last_res = np.inf
    for _ in range(max_iters):
        r2 = (ux * ux + uy * uy) / (corner * corner)
        den = _denominator(r2, coeffs)
        nx = ddx * den
        ny = ddy * den
        if damping != 1.0:
            nx = ux + damping * (nx - ux)
            ny = uy + damping * (ny - uy)
        res = np.hypot(nx - ux, ny - uy)
        ux, uy = nx, ny
        worst = float(res.max()) if res.size else 0.0
        if worst < tol:
            break
        if worst > last_res * 1.5:  # oscillating: damp and keep going
            damping *= 0.5
        last_res = worst
    r2 = (ux * ux + uy * uy) / (corner * corner)
    check_x = ddx * _denominator(r2, coeffs)
    check_y = ddy * _denominator(r2, coeffs)
    converged = np.hypot(check_x - ux, check_y - uy) < tol
    converged &= np.isfinite(ux) & np.isfinite(uy)
    ux = np.where(converged, ux, ddx)
    uy = np.where(converged, uy, ddy)
    return cx + ux, cy + uy, converged


def distort(img: Image, coeffs, interpolation: str = "bilinear") -> Image:
    """Apply radial distortion: each output pixel samples the source at the
    undistorted position solving the division model."""
    if interpolation != "bilinear":
        raise ValueError(f"unsupported interpolation: {interpolation!r}")
    h, w = img.height, img.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    xu, yu, converged = undistort_coords(xs, ys, w, h, coeffs)
    bad = int(converged.size - converged.sum())
    if bad:
        log.warning("distort: %d pixel(s) failed to invert the model; "
                    "falling back to identity there", bad)
    return Image(np.clip(bilinear_sample_grid(img.data, xu, yu), 0.0, 1.0))


def undistort(img: Image, coeffs) -> Image:
    """Inverse warp of distort: output pixels sample the source at their
    forward-distorted positions."""
    h, w = img.height, img.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    xd, yd = distort_coords(xs, ys, w, h, coeffs)
    return Image(np.clip(bilinear_sample_grid(img.data, xd, yd), 0.0, 1.0))


# ---------------------------------------------------------------------------
# Signal-dependent noise
# ---------------------------------------------------------------------------

def _philox_key(seed: int, stream: tuple) -> np.ndarray:
    """128-bit key from the seed and stream labels, stable across runs."""
    parts = [str(int(seed))] + [str(s) for s in stream]
    digest = hashlib.blake2b("|".join(parts).encode(), digest_size=16).digest()
    return np.frombuffer(digest, dtype=np.uint64)


def derive_rng(seed: int, stream: tuple = ()) -> np.random.Generator:
    """Counter-based generator for a (seed, stream) key; order independent."""
    return np.random.Generator(np.random.Philox(key=_philox_key(seed, stream)))


def gaussian_field(shape, seed: int, stream: tuple = ()) -> np.ndarray:
    """Standard-normal field keyed by (seed, stream), one draw per sample.

    Uniforms come from a Philox counter generator and map through the
    inverse normal CDF, so the value at a sample depends only on the key
    and the sample's position in the field.
    """
    gen = np.random.Generator(np.random.Philox(key=_philox_key(seed, stream)))
    # random() yields k / 2^53; the half-step shift keeps u strictly inside
    # (0, 1) so ndtri never sees an endpoint.
    u = gen.random(shape) + 2.0 ** -54
    return ndtri(u)


def add_signal_noise(img: Image, cfg: NoiseConfig, stream: tuple = ()) -> Image:
    """Add intensity-proportional Gaussian noise; identity when sigma is 0.

    Different stream labels (for example view identifiers) give
    independent fields under the same seed.
    """
    if cfg.sigma == 0.0:
        return img
    noise = gaussian_field(img.data.shape, cfg.seed, stream) * cfg.sigma
    return Image(np.clip(img.data * (1.0 + noise), 0.0, 1.0))
