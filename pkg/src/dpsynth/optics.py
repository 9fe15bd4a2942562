"""Thin-lens geometry: camera parameters and depth to signed blur radius.

A point at distance d from a lens focused at distance s projects a blur
disk (circle of confusion) whose radius in sensor millimeters is

    r_mm = (q / 2) * (s' / s) * (d - s) / d

with s' = f*s / (s - f) the lens-to-sensor distance and q = f / F the
aperture diameter. The sign is kept: r > 0 for points behind the focal
plane (front focus) and r < 0 for points in front of it (back focus).
Radii convert to pixels through the sensor sampling density.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imgcore import DepthMap


class InvalidCameraError(ValueError):
    """Camera parameters violate the thin-lens preconditions."""


@dataclass(frozen=True)
class CameraConfig:
    """Virtual camera: focal length (mm), f-number, focus distance (m).

    pixels_per_mm sets the sensor sampling density used to express blur
    radii in pixels. distortion_coeffs are the division-model radial
    coefficients applied by the lens-effects stage.
    """

    focal_length_mm: float
    f_number: float
    focus_distance_m: float
    pixels_per_mm: float = 100.0
    distortion_coeffs: tuple[float, float, float] = (0.0, 0.0, 0.0)
    cam_id: str = "cam"

    def __post_init__(self):
        if self.focal_length_mm <= 0:
            raise InvalidCameraError(f"focal length must be positive: {self.focal_length_mm}")
        if self.f_number <= 0:
            raise InvalidCameraError(f"f-number must be positive: {self.f_number}")
        if self.pixels_per_mm <= 0:
            raise InvalidCameraError(f"pixels_per_mm must be positive: {self.pixels_per_mm}")
        if self.focus_distance_m * 1000.0 <= self.focal_length_mm:
            raise InvalidCameraError(
                f"focus distance {self.focus_distance_m} m must exceed focal length "
                f"{self.focal_length_mm} mm")
        object.__setattr__(self, "distortion_coeffs", tuple(float(c) for c in self.distortion_coeffs))


@dataclass(frozen=True)
class CocField:
    """Per-pixel signed circle-of-confusion radius in pixels."""

    signed_radius: np.ndarray  # (h, w) float64

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.signed_radius, dtype=np.float64))
        if arr.ndim != 2:
            raise ValueError(f"CoC field must be 2-D, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("CoC field contains non-finite radii")
        arr.setflags(write=False)
        object.__setattr__(self, "signed_radius", arr)

    @property
    def height(self) -> int:
        return self.signed_radius.shape[0]

    @property
    def width(self) -> int:
        return self.signed_radius.shape[1]


# Blur radii under this threshold are treated as in focus downstream;
# sub-pixel kernels carry no usable shape.
IN_FOCUS_RADIUS_PX = 0.5


def lens_derived(cam: CameraConfig) -> tuple[float, float]:
    """Return (s_prime_mm, q_mm): lens-to-sensor distance and aperture diameter."""
    f = cam.focal_length_mm
    s = cam.focus_distance_m * 1000.0
    s_prime = f * s / (s - f)
    q = f / cam.f_number
    return s_prime, q


def _radius_scale_px(cam: CameraConfig) -> float:
    """Asymptotic (d -> inf) blur radius in pixels, the per-camera constant."""
    s_prime, q = lens_derived(cam)
    s_mm = cam.focus_distance_m * 1000.0
    return (q / 2.0) * (s_prime / s_mm) * cam.pixels_per_mm


def coc_radius(cam: CameraConfig, d_meters: float) -> float:
    """Signed blur radius in pixels for a point at distance d_meters."""
    s_m = cam.focus_distance_m
    return _radius_scale_px(cam) * ((d_meters - s_m) / d_meters)


def coc_field(cam: CameraConfig, depth: DepthMap) -> CocField:
    """Vectorized coc_radius over a depth map; bit-identical per pixel."""
    s_m = cam.focus_distance_m
    return CocField(_radius_scale_px(cam) * ((depth.data - s_m) / depth.data))
