"""Synthetic dual-pixel defocus data generation, calibration, and metrics."""

from .imgcore import DepthMap, Image, Kernel2D, load_depth, load_image, save_image
from .optics import CameraConfig, CocField, coc_field, coc_radius, lens_derived
from .psfbank import DpPsf, PsfBank, PsfParams, build_bank, make_combined_psf, split_dp_psf
from .render import DpFrame, decompose_layers, radial_distance_map, render_dp_frame
from .lensfx import NoiseConfig, add_signal_noise, distort, undistort
from .metrics import EdgeLossConfig, edge_loss, mae, ncc2d, psnr, ssim
from .calib import estimate_psf, fit_distortion_coeffs, fit_psf_params

__all__ = [
    "CameraConfig", "CocField", "DepthMap", "DpFrame", "DpPsf", "EdgeLossConfig",
    "Image", "Kernel2D", "NoiseConfig", "PsfBank", "PsfParams",
    "add_signal_noise", "build_bank", "coc_field", "coc_radius", "decompose_layers",
    "distort", "edge_loss", "estimate_psf", "fit_distortion_coeffs", "fit_psf_params",
    "lens_derived", "load_depth", "load_image", "mae", "make_combined_psf", "ncc2d",
    "psnr", "radial_distance_map", "render_dp_frame", "save_image", "split_dp_psf",
    "ssim", "undistort",
]

__version__ = "0.1.0"
