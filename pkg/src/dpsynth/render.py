"""Depth-layered defocus rendering producing dual-pixel view pairs.

The scene is split into depth layers binned uniformly in signed blur
radius. Each layer's color and coverage mask are convolved with the
left/right PSFs for that radius, then the blurred layers are alpha
composited back to front using the blurred masks as opacity. Compositing
normalizes by both the per-layer blurred mask (avoids edge darkening
where coverage falls below one) and the accumulated alpha (keeps a flat
field flat no matter how depth fragments into layers).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import cv2
import numpy as np
from scipy.signal import fftconvolve

from .imgcore import DepthMap, Image, Kernel2D
from .optics import CameraConfig, CocField, coc_field
from .psfbank import DpPsf, PsfBank, RADIUS_STEP_PX, kernel_side

MAX_LAYERS_DEFAULT = 500
DIRECT_KERNEL_LIMIT = 15  # spatial convolution up to this side, FFT beyond
COMPOSITE_EPS = 1e-6


def convolve2d(plane: np.ndarray, kernel: np.ndarray, method: str = "auto") -> np.ndarray:
    """Zero-padded same-size 2-D convolution of one plane.

    method "auto" picks direct spatial convolution for kernels up to
    DIRECT_KERNEL_LIMIT on a side and FFT beyond; both paths agree to
    well under 1e-5.
    """
    if method == "auto":
        method = "direct" if kernel.shape[0] <= DIRECT_KERNEL_LIMIT else "fft"
    if method == "direct":
        flipped = np.ascontiguousarray(kernel[::-1, ::-1])
        return cv2.filter2D(plane, -1, flipped, borderType=cv2.BORDER_CONSTANT)
    if method == "fft":
        return fftconvolve(plane, kernel, mode="same")
    raise ValueError(f"unknown convolution method: {method!r}")


def _convolve_stack(stack: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Convolve a (planes, h, w) stack with one kernel."""
    if kernel.shape == (1, 1):
        return stack * kernel[0, 0]
    if kernel.shape[0] <= DIRECT_KERNEL_LIMIT:
        flipped = np.ascontiguousarray(kernel[::-1, ::-1])
        return np.stack([cv2.filter2D(p, -1, flipped, borderType=cv2.BORDER_CONSTANT)
                         for p in stack])
    return fftconvolve(stack, kernel[None, :, :], mode="same", axes=(1, 2))


@dataclass(frozen=True)
class DepthLayer:
    """One depth slice: binary coverage mask and masked color.

    Masks and colors are stored cropped to the slice's bounding box
    (origin row0/col0); the full-frame views reconstruct on demand.
    Index 0 is the farthest layer.
    """

    index: int
    representative_depth: float
    signed_radius: float
    frame_shape: tuple[int, int]
    row0: int
    col0: int
    mask_crop: np.ndarray   # (bh, bw) float64, binary
    color_crop: np.ndarray  # (bh, bw, c) float64, zero outside mask

    @property
    def mask(self) -> Image:
        h, w = self.frame_shape
        full = np.zeros((h, w, 1))
        bh, bw = self.mask_crop.shape
        full[self.row0:self.row0 + bh, self.col0:self.col0 + bw, 0] = self.mask_crop
        return Image(full)

    @property
    def color(self) -> Image:
        h, w = self.frame_shape
        full = np.zeros((h, w, self.color_crop.shape[2]))
        bh, bw = self.mask_crop.shape
        full[self.row0:self.row0 + bh, self.col0:self.col0 + bw] = self.color_crop
        return Image(full)


@dataclass(frozen=True)
class BlurredLayer:
    """Per-view blurred color and coverage for one depth layer."""

    left_color: np.ndarray
    right_color: np.ndarray
    left_mask: np.ndarray
    right_mask: np.ndarray


@dataclass
class FrameMeta:
    camera_id: str = ""
    psf_n: int | None = None
    psf_alpha: float | None = None
    psf_beta: float | None = None
    psf_kappa: float | None = None
    noise_sigma: float | None = None
    seed: int | None = None
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DpFrame:
    """Rendered bundle: DP views, combined blur, reference, radial channel."""

    left: Image
    right: Image
    combined_blur: Image
    sharp: Image
    radial_distance: Image
    meta: FrameMeta


def decompose_layers(sharp: Image, coc: CocField,
                     max_layers: int = MAX_LAYERS_DEFAULT,
                     depth: DepthMap | None = None) -> list[DepthLayer]:
    """Split a frame into depth layers binned uniformly in signed radius.

    Every pixel lands in exactly one bin, empty bins are dropped, and the
    result is ordered far to near (descending radius, which the thin-lens
    mapping makes identical to descending depth). The bin count is capped
    at max_layers and never finer than the PSF bank's half-pixel radius
    quantization, since finer slicing cannot change the selected kernels.
    """
    if max_layers < 1:
        raise ValueError(f"max_layers must be >= 1, got {max_layers}")
    if (sharp.height, sharp.width) != (coc.height, coc.width):
        raise ValueError("image and CoC field dimensions differ")
    r = coc.signed_radius
    rmin = float(r.min())
    rmax = float(r.max())
    span = rmax - rmin
    if span <= 0.0:
        nbins = 1
        idx = np.zeros(r.shape, dtype=np.intp)
    else:
        nbins = max(1, min(max_layers, math.ceil(span / RADIUS_STEP_PX)))
        idx = np.minimum((np.floor((r - rmin) / span * nbins)).astype(np.intp), nbins - 1)

    layers = []
    occupied = np.unique(idx)
    for order, b in enumerate(occupied[::-1]):  # descending radius = far first
        member = idx == b
        rows = np.flatnonzero(member.any(axis=1))
        cols = np.flatnonzero(member.any(axis=0))
        r0, r1 = int(rows[0]), int(rows[-1]) + 1
        c0, c1 = int(cols[0]), int(cols[-1]) + 1
        mask_crop = member[r0:r1, c0:c1].astype(np.float64)
        color_crop = sharp.data[r0:r1, c0:c1] * mask_crop[:, :, None]
        center = rmin if span <= 0.0 else rmin + (b + 0.5) * span / nbins
        rep_depth = float(depth.data[member].mean()) if depth is not None else float("nan")
        layers.append(DepthLayer(
            index=order, representative_depth=rep_depth, signed_radius=float(center),
            frame_shape=(sharp.height, sharp.width), row0=r0, col0=c0,
            mask_crop=mask_crop, color_crop=color_crop))
    return layers


def blur_layer(layer: DepthLayer, psf: DpPsf) -> BlurredLayer:
    """Convolve a layer's color and mask with the left/right PSFs.

    The convolution runs on the layer's bounding box inflated by the
    kernel half-width, which is exact under zero padding because the
    layer is zero outside its box.
    """
    h, w = layer.frame_shape
    half = psf.left.size // 2
    r0 = max(0, layer.row0 - half)
    c0 = max(0, layer.col0 - half)
    r1 = min(h, layer.row0 + layer.mask_crop.shape[0] + half)
    c1 = min(w, layer.col0 + layer.mask_crop.shape[1] + half)

    nchan = layer.color_crop.shape[2]
    stack = np.zeros((nchan + 1, r1 - r0, c1 - c0))
    rr = layer.row0 - r0
    cc = layer.col0 - c0
    bh, bw = layer.mask_crop.shape
    stack[:nchan, rr:rr + bh, cc:cc + bw] = np.moveaxis(layer.color_crop, 2, 0)
    stack[nchan, rr:rr + bh, cc:cc + bw] = layer.mask_crop

    out = {}
    for name, kern in (("left", psf.left.taps), ("right", psf.right.taps)):
        blurred = _convolve_stack(stack, kern)
        color = np.zeros((h, w, nchan))
        mask = np.zeros((h, w))
        color[r0:r1, c0:c1] = np.moveaxis(blurred[:nchan], 0, 2)
        mask[r0:r1, c0:c1] = blurred[nchan]
        out[name] = (np.maximum(color, 0.0), np.maximum(mask, 0.0))
    return BlurredLayer(left_color=out["left"][0], right_color=out["right"][0],
                        left_mask=out["left"][1], right_mask=out["right"][1])


def composite(blurred_layers: Iterable[BlurredLayer]) -> tuple[Image, Image]:
    """Alpha-composite blurred layers far to near into the two DP views.

    Per view: layer color is normalized by its blurred mask, opacity is
    twice the blurred mask (per-view kernels carry half mass), and the
    final accumulation is divided by the composited opacity before
    restoring the half-energy split. The trailing normalization keeps a
    constant field constant even when opacity never saturates.
    """
    acc = None
    for bl in blurred_layers:
        if acc is None:
            shape = bl.left_mask.shape
            nchan = bl.left_color.shape[2]
            acc = {v: (np.zeros(shape + (nchan,)), np.zeros(shape)) for v in ("l", "r")}
        for v, color, mask in (("l", bl.left_color, bl.left_mask),
                               ("r", bl.right_color, bl.right_mask)):
            c = np.where(mask[:, :, None] > COMPOSITE_EPS,
                         color / np.maximum(mask, COMPOSITE_EPS)[:, :, None], 0.0)
            a = np.clip(2.0 * mask, 0.0, 1.0)
            col_acc, w_acc = acc[v]
            col_acc *= (1.0 - a)[:, :, None]
            col_acc += c * a[:, :, None]
            w_acc *= 1.0 - a
            w_acc += a
    if acc is None:
        raise ValueError("composite needs at least one layer")
    views = []
    for v in ("l", "r"):
        col_acc, w_acc = acc[v]
        normed = col_acc / np.maximum(w_acc, COMPOSITE_EPS)[:, :, None]
        views.append(Image(np.clip(normed / 2.0, 0.0, 1.0)))
    return views[0], views[1]


def radial_distance_map(width: int, height: int) -> Image:
    """Relative distance from frame center: 0 at center, 1 at corners."""
    if width < 1 or height < 1:
        raise ValueError("dimensions must be positive")
    cx = (width - 1) / 2.0
    cy = (height - 1) / 2.0
    ys, xs = np.mgrid[0:height, 0:width]
    dist = np.hypot(xs - cx, ys - cy)
    corner = math.hypot(cx, cy)
    if corner == 0.0:
        return Image(np.zeros((height, width, 1)))
    return Image((dist / corner)[:, :, None])


def max_kernel_halfwidth(coc: CocField, kappa: float) -> int:
    """Largest PSF half-width the field will request; inset for interior tests."""
    r = float(np.abs(coc.signed_radius).max())
    return kernel_side(r, kappa) // 2


def render_dp_frame(sharp: Image, depth: DepthMap, cam: CameraConfig,
                    n: int, alpha: float, beta: float, bank: PsfBank,
                    max_layers: int = MAX_LAYERS_DEFAULT) -> DpFrame:
    """Full defocus render: CoC field, layering, per-layer DP blur, composite.

    Distortion and sensor noise are applied by the lens-effects stage, not
    here. The combined blur equals left + right by construction.
    """
    if (sharp.height, sharp.width) != (depth.height, depth.width):
        raise ValueError(
            f"image {sharp.width}x{sharp.height} and depth {depth.width}x{depth.height} differ")
    coc = coc_field(cam, depth)
    layers = decompose_layers(sharp, coc, max_layers=max_layers, depth=depth)

    def blurred() -> Iterator[BlurredLayer]:
        for layer in layers:
            psf = bank.psf_for(n, alpha, beta, layer.signed_radius)
            yield blur_layer(layer, psf)

    left, right = composite(blurred())
    combined = Image(np.clip(left.data + right.data, 0.0, 1.0))
    meta = FrameMeta(camera_id=cam.cam_id, psf_n=n, psf_alpha=alpha,
                     psf_beta=beta, psf_kappa=bank.kappa)
    return DpFrame(left=left, right=right, combined_blur=combined, sharp=sharp,
                   radial_distance=radial_distance_map(sharp.width, sharp.height),
                   meta=meta)
