"""Acceptance criteria, one test per criterion, each printing a PASS line.

Run with ``pytest -v tests/test_acceptance.py`` (add ``-s`` to see the
PASS lines inline).
"""

import hashlib
import json
import shutil
import time
from pathlib import Path

import cv2
import numpy as np
import pytest

from dpsynth.calib import (default_shape_grids, estimate_psf,
                           fit_distortion_coeffs, fit_psf_params,
                           make_disk_pattern)
from dpsynth.cli import main
from dpsynth.config import default_cameras
from dpsynth.imgcore import DepthMap, Image, encode_png, save_image
from dpsynth.lensfx import (DISTORTION_PRESETS, NoiseConfig, add_signal_noise,
                            distort_coords, undistort_coords)
from dpsynth.metrics import EdgeLossConfig, edge_loss, mae, ncc2d, psnr, ssim
from dpsynth.optics import CameraConfig, coc_field
from dpsynth.psfbank import PsfBank, PsfParams, build_bank, make_combined_psf
from dpsynth.render import max_kernel_halfwidth, render_dp_frame

CAM = CameraConfig(focal_length_mm=50.0, f_number=4.0, focus_distance_m=1.0,
                   pixels_per_mm=100.0, cam_id="acc")

N_GRID = (3, 6, 9)
ALPHA_GRID = (0.4, 0.6, 0.8, 1.0)
BETA_GRID = (0.1, 0.2, 0.3, 0.4)
KAPPA = 0.14


def report(num, name, t0):
    print(f"\nACCEPTANCE {num:02d} {name}: PASS ({time.perf_counter() - t0:.1f}s)")


def test_01_psf_constraint_suite():
    t0 = time.perf_counter()
    radii = [r * s for r in (2.0, 5.0, 10.0, 20.0) for s in (+1, -1)]
    bank = build_bank(N_GRID, ALPHA_GRID, BETA_GRID, kappa=KAPPA, radius_grid=radii)
    assert len(bank) == 48 * 8
    for entry in bank.entries():
        l, r, c = entry.left.taps, entry.right.taps, entry.combined.taps
        assert abs(l.sum() - 0.5) <= 1e-6
        assert abs(r.sum() - 0.5) <= 1e-6
        assert l.min() >= 0.0
        assert np.abs(r - l[:, ::-1]).max() <= 1e-12
        assert np.abs(l + r - c).max() <= 1e-9
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0, f"criterion 1 exceeded runtime bound: {elapsed:.1f}s"
    report(1, "psf-constraint-suite", t0)


def test_02_in_focus_identity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(42)
    sharp = Image(rng.random((256, 256, 3)))
    depth = DepthMap(np.full((256, 256), CAM.focus_distance_m))
    frame = render_dp_frame(sharp, depth, CAM, 3, 0.8, 0.2, PsfBank(KAPPA))
    err = np.abs(frame.left.data + frame.right.data - sharp.data).max()
    assert err < 1e-5, f"in-focus identity error {err}"
    elapsed = time.perf_counter() - t0
    assert elapsed < 5.0, f"criterion 2 exceeded runtime bound: {elapsed:.1f}s"
    report(2, "in-focus-identity", t0)


def test_03_energy_conservation():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    gray = Image(np.full((128, 128, 3), 0.5))
    depth = DepthMap(rng.uniform(0.8, 2.0, (128, 128)))
    frame = render_dp_frame(gray, depth, CAM, 3, 0.8, 0.2, PsfBank(KAPPA))
    inset = max_kernel_halfwidth(coc_field(CAM, depth), KAPPA)
    assert 0 < inset < 64
    total = (frame.left.data + frame.right.data)[inset:-inset, inset:-inset]
    err = np.abs(total - 0.5).max()
    assert err < 1e-3, f"interior energy error {err}"
    report(3, "energy-conservation", t0)


def test_04_dp_disparity_flip():
    t0 = time.perf_counter()

    def offset(d):
        data = np.zeros((65, 65, 1))
        data[32, 32, 0] = 1.0
        frame = render_dp_frame(Image(data), DepthMap(np.full((65, 65), d)),
                                CAM, 3, 0.8, 0.2, PsfBank(KAPPA))
        xs = np.arange(65, dtype=float)
        l = frame.left.data[:, :, 0]
        r = frame.right.data[:, :, 0]
        return (l * xs).sum() / l.sum() - (r * xs).sum() / r.sum()

    front = offset(2.0)    # behind the focal plane
    back = offset(0.55)    # in front of it
    assert front != 0.0 and back != 0.0
    assert np.sign(front) == -np.sign(back)
    report(4, "dp-disparity-flip", t0)


def test_05_psf_model_fidelity_ordering():
    t0 = time.perf_counter()
    target = make_combined_psf(PsfParams(n=3, alpha=0.8, beta=0.1, kappa=KAPPA, radius=10.0))
    params, _ = fit_psf_params(target, default_shape_grids(radius=(5.0, 10.0, 20.0)))
    fitted = make_combined_psf(PsfParams(n=params.n, alpha=params.alpha, beta=params.beta,
                                         kappa=params.kappa, radius=params.radius))
    size = target.size
    ys, xs = np.mgrid[0:size, 0:size].astype(float)
    half = size // 2
    disk = ((xs - half) ** 2 + (ys - half) ** 2 <= 100.0).astype(float)
    disk /= disk.sum()

    def embedded_ncc(a, b):
        s = max(a.shape[0], b.shape[0])
        pa = np.zeros((s, s)); oa = (s - a.shape[0]) // 2
        pa[oa:oa + a.shape[0], oa:oa + a.shape[0]] = a
        pb = np.zeros((s, s)); ob = (s - b.shape[0]) // 2
        pb[ob:ob + b.shape[0], ob:ob + b.shape[0]] = b
        return ncc2d(pa, pb)

    score_model = embedded_ncc(target.taps, fitted.taps)
    score_disk = embedded_ncc(target.taps, disk)
    assert score_model > score_disk, (score_model, score_disk)
    report(5, "psf-model-fidelity-ordering", t0)


def test_06_calibration_loop_closure():
    t0 = time.perf_counter()
    pattern = make_disk_pattern((3, 3), disk_radius=4.0, spacing=20.0, size=64)
    s = pattern.data[:, :, 0]
    truth_params = PsfParams(n=6, alpha=0.6, beta=0.2, kappa=KAPPA, radius=8.0)
    truth = make_combined_psf(truth_params).taps
    from scipy.signal import fftconvolve
    blurred = np.clip(fftconvolve(s, truth, mode="same"), 0.0, 1.0)

    pad = (31 - truth.shape[0]) // 2
    truth31 = np.zeros((31, 31))
    truth31[pad:pad + truth.shape[0], pad:pad + truth.shape[1]] = truth

    est = estimate_psf(s, blurred, kernel_size=31, max_iters=500)
    score_clean = ncc2d(est.kernel.taps, truth31)
    assert score_clean > 0.98, f"noise-free recovery ncc {score_clean}"

    noisy = add_signal_noise(Image(blurred[:, :, None]),
                             NoiseConfig(sigma=0.05, seed=1), ("calib",))
    est_noisy = estimate_psf(s, noisy.data[:, :, 0], kernel_size=31, max_iters=500)
    score_noisy = ncc2d(est_noisy.kernel.taps, truth31)
    assert score_noisy > 0.90, f"noisy recovery ncc {score_noisy}"

    grids = default_shape_grids(radius=(2.0, 5.0, 8.0, 10.0))
    fitted, _ = fit_psf_params(est.kernel, grids)
    assert (fitted.n, fitted.alpha, fitted.beta, fitted.kappa, fitted.radius) == \
        (truth_params.n, truth_params.alpha, truth_params.beta,
         truth_params.kappa, truth_params.radius)
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0, f"criterion 6 exceeded runtime bound: {elapsed:.1f}s"
    report(6, "calibration-loop-closure", t0)


def test_07_distortion_recovery():
    t0 = time.perf_counter()
    from dpsynth.calib import make_square_pattern
    from dpsynth.lensfx import distort
    pattern = make_square_pattern((5, 5), square_side=7.0, spacing=18.0, size=96)
    presets = list(DISTORTION_PRESETS.values())
    axes = tuple(tuple(sorted({0.0} | {p[i] for p in presets})) for i in range(3))
    for truth in presets:
        reference = distort(pattern, truth)
        coeffs, score = fit_distortion_coeffs(reference, pattern, axes)
        assert coeffs == truth, f"expected {truth}, got {coeffs}"
        assert score > 0.99

    # round trip bound via warp composition on the interior
    h, w = 120, 160
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    for truth in presets:
        xu, yu, ok = undistort_coords(xs, ys, w, h, truth)
        xb, yb = distort_coords(xu, yu, w, h, truth)
        err = np.hypot(xb - xs, yb - ys)[10:-10, 10:-10]
        assert ok.all() and err.max() < 0.5
    report(7, "distortion-recovery", t0)


def test_08_noise_statistics():
    t0 = time.perf_counter()
    img = Image(np.full((1000, 1000, 1), 0.5))
    noisy = add_signal_noise(img, NoiseConfig(sigma=0.1, seed=3), ("acc", "l"))
    delta = noisy.data - img.data
    assert abs(delta.std() - 0.05) <= 0.001

    silent = add_signal_noise(img, NoiseConfig(sigma=0.0, seed=3), ("acc", "l"))
    assert np.array_equal(silent.data, img.data)

    again = add_signal_noise(img, NoiseConfig(sigma=0.1, seed=3), ("acc", "l"))
    assert encode_png(noisy, 16) == encode_png(again, 16)
    report(8, "noise-statistics", t0)


def test_09_metric_sanity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    a = rng.random((64, 64, 3))
    assert psnr(a, a) == 100.0
    assert ssim(a, a) == pytest.approx(1.0)
    assert mae(a, a) == 0.0
    assert edge_loss(a, a).total == 0.0

    from scipy.ndimage import gaussian_filter
    gt = rng.random((96, 96))
    blurred = gaussian_filter(gt, 3.0)
    cfg = EdgeLossConfig(scales=(3, 7, 11), lambda_x=0.03, lambda_y=0.02)
    losses = [edge_loss((1 - t) * blurred + t * gt, gt, cfg).total
              for t in np.linspace(0.0, 1.0, 5)]
    assert all(x > y for x, y in zip(losses, losses[1:]))
    assert losses[-1] == 0.0
    report(9, "metric-sanity", t0)


def _make_batch_inputs(root: Path) -> Path:
    rng = np.random.default_rng(2024)
    (root / "in").mkdir(parents=True)
    lines = ["seed: 1234", "output_dir: out", "bit_depth: 8",
             "manifest:", "  - sequence: seq00", "    frames:"]
    w, h = 640, 480
    for i in range(5):
        img = rng.random((h, w, 3))
        save_image(Image(img), root / "in" / f"{i}.png", bit_depth=16)
        ramp = np.tile(np.linspace(4.0, 60.0, w), (h, 1))
        depth = ramp + 2.0 * np.sin(np.linspace(0, 6.0, h))[:, None] + i
        # a couple of foreground boxes to force occlusion layering
        depth[120:260, 80 + 40 * i:220 + 40 * i] = 5.5
        depth[300:420, 360:520] = 9.0 + i
        codes = np.round(depth / 0.01).astype(np.uint16)
        cv2.imwrite(str(root / "in" / f"{i}_d.png"), codes)
        lines.append(f"      - {{image: in/{i}.png, depth: in/{i}_d.png}}")
    cfg = root / "cfg.yaml"
    cfg.write_text("\n".join(lines) + "\n")
    return cfg


def _digest_tree(root: Path) -> dict:
    out = {}
    for f in sorted(root.rglob("*")):
        if f.is_file():
            out[str(f.relative_to(root))] = hashlib.sha256(f.read_bytes()).hexdigest()
    return out


def test_10_generate_determinism(tmp_path):
    t0 = time.perf_counter()
    cfg_path = _make_batch_inputs(tmp_path)

    t1 = time.perf_counter()
    rc = main(["generate", "--config", str(cfg_path), "--jobs", "1",
               "--out", str(tmp_path / "out_j1")])
    serial_time = time.perf_counter() - t1
    assert rc == 0
    assert serial_time < 120.0, f"serial run exceeded bound: {serial_time:.0f}s"

    t2 = time.perf_counter()
    rc = main(["generate", "--config", str(cfg_path), "--jobs", "8",
               "--out", str(tmp_path / "out_j8")])
    parallel_time = time.perf_counter() - t2
    assert rc == 0
    assert parallel_time < 120.0, f"parallel run exceeded bound: {parallel_time:.0f}s"

    d1 = _digest_tree(tmp_path / "out_j1")
    d2 = _digest_tree(tmp_path / "out_j8")
    assert d1 == d2, "outputs differ between job counts"
    quintets = [k for k in d1 if k.endswith("_l.png")]
    assert len(quintets) == 25  # 5 frames x 5 camera sets
    assert len([k for k in d1 if k.endswith(".png")]) == 125
    shutil.rmtree(tmp_path / "out_j1")
    shutil.rmtree(tmp_path / "out_j8")
    print(f"\n    (serial {serial_time:.0f}s, parallel {parallel_time:.0f}s)")
    report(10, "generate-determinism", t0)
