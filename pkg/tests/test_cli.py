import hashlib
import json
import shutil
from pathlib import Path

import cv2
import numpy as np
import pytest

from dpsynth.cli import (evaluate, generate, main, psf_export, psf_gallery,
                         run_frame_task, FrameTask)
from dpsynth.config import (ConfigError, GenerationConfig, default_cameras,
                            default_sigma_grid, load_config, preset_config)
from dpsynth.imgcore import Image, load_image, read_pfm, save_image
from dpsynth.lensfx import DISTORTION_PRESETS
from dpsynth.psfbank import PsfBank, build_bank


def make_inputs(root: Path, frames=2, size=(60, 80), seed=0, seq="s0"):
    rng = np.random.default_rng(seed)
    (root / "in").mkdir(parents=True, exist_ok=True)
    entries = []
    h, w = size
    for i in range(frames):
        img = rng.random((h, w, 3))
        save_image(Image(img), root / "in" / f"{i}.png", bit_depth=16)
        depth_m = np.tile(np.linspace(3.0, 30.0, w), (h, 1)) + i
        codes = np.round(depth_m / 0.01).astype(np.uint16)
        cv2.imwrite(str(root / "in" / f"{i}_d.png"), codes)
        entries.append({"image": f"in/{i}.png", "depth": f"in/{i}_d.png"})
    return entries


def write_config(root: Path, entries, seq="s0", extra=""):
    lines = ["seed: 7", "output_dir: out", "bit_depth: 8",
             "manifest:", f"  - sequence: {seq}", "    frames:"]
    for e in entries:
        lines.append(f"      - {{image: {e['image']}, depth: {e['depth']}}}")
    (root / "cfg.yaml").write_text("\n".join(lines) + "\n" + extra)
    return root / "cfg.yaml"


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(Path(root).rglob("*")):
        if f.is_file():
            h.update(str(f.relative_to(root)).encode())
            h.update(f.read_bytes())
    return h.hexdigest()


# --- config ---

def test_preset_defaults():
    cfg = preset_config("paper-synthia")
    assert len(cfg.cameras) == 5
    assert cfg.cameras[0].distortion_coeffs == DISTORTION_PRESETS["set1"]
    assert cfg.cameras[4].distortion_coeffs == DISTORTION_PRESETS["set5"]
    assert len(cfg.sigma_grid) == 91
    assert cfg.sigma_grid[0] == pytest.approx(0.05)
    assert cfg.sigma_grid[1] == pytest.approx(0.055)
    assert cfg.sigma_grid[-1] == pytest.approx(0.5)
    assert len(cfg.psf_grids.shape_combinations()) == 48
    assert cfg.psf_grids.kappa == 0.14


def test_unknown_preset_rejected():
    with pytest.raises(ConfigError):
        preset_config("nope")


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.yaml")


def test_config_validation_names_missing_input(tmp_path):
    cfg_path = write_config(tmp_path, [{"image": "in/x.png", "depth": "in/y.png"}])
    cfg = load_config(cfg_path)
    with pytest.raises(ConfigError, match=r"s0\[0\].*x\.png"):
        cfg.validate_inputs()


def test_config_rejects_bad_bit_depth(tmp_path):
    entries = make_inputs(tmp_path, frames=1)
    cfg_path = write_config(tmp_path, entries, extra="bit_depth: 12\n")
    with pytest.raises(ConfigError):
        load_config(cfg_path)


def test_config_rejects_bad_camera(tmp_path):
    entries = make_inputs(tmp_path, frames=1)
    extra = ("cameras:\n"
             "  - {id: bad, focal_length_mm: 50, f_number: 2, focus_distance_m: 0.01}\n")
    cfg_path = write_config(tmp_path, entries, extra=extra)
    with pytest.raises(ConfigError, match="camera 0"):
        load_config(cfg_path)


def test_config_camera_distortion_preset_by_name(tmp_path):
    entries = make_inputs(tmp_path, frames=1)
    extra = ("cameras:\n"
             "  - {id: c, focal_length_mm: 50, f_number: 4, focus_distance_m: 2,"
             " distortion: set3}\n")
    cfg = load_config(write_config(tmp_path, entries, extra=extra))
    assert cfg.cameras[0].distortion_coeffs == DISTORTION_PRESETS["set3"]


# --- generate ---

@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    """One generated dataset shared by the read-only assertions below."""
    root = tmp_path_factory.mktemp("gen")
    entries = make_inputs(root, frames=2)
    extra = ("cameras:\n"
             "  - {id: camA, focal_length_mm: 50, f_number: 4, focus_distance_m: 5,"
             " distortion: set2}\n"
             "  - {id: camB, focal_length_mm: 70, f_number: 5, focus_distance_m: 8,"
             " distortion: set4}\n")
    cfg = load_config(write_config(root, entries, extra=extra))
    report = generate(cfg, jobs=1)
    return root, cfg, report


def test_generate_file_layout(small_dataset):
    root, cfg, report = small_dataset
    assert report.ok
    assert len(report.entries) == 4  # 2 frames x 2 cameras
    for frame in (0, 1):
        for cam in ("camA", "camB"):
            for tag in ("l", "r", "b", "s", "rd"):
                assert (root / "out" / "s0" / f"{frame:04d}_{cam}_{tag}.png").is_file()
            assert (root / "out" / "s0" / f"{frame:04d}_{cam}.json").is_file()


def test_generate_manifest_complete(small_dataset):
    root, cfg, report = small_dataset
    manifest = json.loads((root / "out" / "manifest.json").read_text())
    assert len(manifest["entries"]) == 4
    listed = {f for e in manifest["entries"] for f in e["files"].values()}
    on_disk = {str(p.relative_to(root / "out"))
               for p in (root / "out").rglob("*") if p.is_file()}
    on_disk.discard("manifest.json")
    assert listed == on_disk
    # sequence grouping and frame indices preserved
    assert all(e["sequence"] == "s0" for e in manifest["entries"])
    assert sorted({e["frame_index"] for e in manifest["entries"]}) == [0, 1]


def test_generate_sidecar_provenance(small_dataset):
    root, cfg, report = small_dataset
    meta = json.loads((root / "out" / "s0" / "0000_camA.json").read_text())
    assert meta["camera"] == "camA"
    assert meta["seed"] == 7
    assert meta["sigma"] in cfg.sigma_grid
    combos = cfg.psf_grids.shape_combinations()
    assert (meta["psf"]["n"], meta["psf"]["alpha"], meta["psf"]["beta"]) in combos


def test_generate_same_frame_draws_across_cameras(small_dataset):
    root, cfg, report = small_dataset
    a = json.loads((root / "out" / "s0" / "0000_camA.json").read_text())
    b = json.loads((root / "out" / "s0" / "0000_camB.json").read_text())
    assert a["sigma"] == b["sigma"] and a["psf"] == b["psf"]
    c = json.loads((root / "out" / "s0" / "0001_camA.json").read_text())
    assert (a["sigma"], a["psf"]) != (c["sigma"], c["psf"])  # new frame, new draw


def test_generate_combined_is_view_sum(small_dataset):
    root, cfg, report = small_dataset
    left = load_image(root / "out" / "s0" / "0000_camA_l.png")
    right = load_image(root / "out" / "s0" / "0000_camA_r.png")
    comb = load_image(root / "out" / "s0" / "0000_camA_b.png")
    # both sides quantized to 8 bits: allow one code of slack
    assert np.abs(np.clip(left.data + right.data, 0, 1) - comb.data).max() <= 2 / 255 + 1e-9


def test_generate_empty_manifest(tmp_path):
    cfg = GenerationConfig(sequences=(), output_dir=tmp_path / "out")
    report = generate(cfg, jobs=1)
    assert report.ok and report.entries == []
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["entries"] == []


def test_generate_deterministic_across_jobs(tmp_path):
    entries = make_inputs(tmp_path, frames=2, size=(40, 50))
    extra = ("cameras:\n"
             "  - {id: c1, focal_length_mm: 50, f_number: 4, focus_distance_m: 5,"
             " distortion: set1}\n")
    cfg_path = write_config(tmp_path, entries, extra=extra)
    cfg = load_config(cfg_path)
    generate(cfg, jobs=1)
    h1 = tree_digest(tmp_path / "out")
    shutil.rmtree(tmp_path / "out")
    generate(cfg, jobs=4)
    h2 = tree_digest(tmp_path / "out")
    assert h1 == h2


def test_generate_partial_failure_keeps_going(tmp_path):
    entries = make_inputs(tmp_path, frames=2, size=(40, 50))
    (tmp_path / "in" / "1_d.png").write_bytes(b"not a png")
    extra = ("cameras:\n"
             "  - {id: c1, focal_length_mm: 50, f_number: 4, focus_distance_m: 5}\n")
    cfg = load_config(write_config(tmp_path, entries, extra=extra))
    report = generate(cfg, jobs=1)
    assert len(report.entries) == 1
    assert len(report.failures) == 1
    assert report.failures[0]["frame_index"] == 1
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert len(manifest["failures"]) == 1


def test_cli_generate_exit_codes(tmp_path):
    rc = main(["generate", "--config", str(tmp_path / "missing.yaml")])
    assert rc == 2
    entries = make_inputs(tmp_path, frames=1, size=(40, 50))
    extra = ("cameras:\n"
             "  - {id: c1, focal_length_mm: 50, f_number: 4, focus_distance_m: 5}\n")
    cfg_path = write_config(tmp_path, entries, extra=extra)
    rc = main(["generate", "--config", str(cfg_path), "--out", str(tmp_path / "o2")])
    assert rc == 0
    assert (tmp_path / "o2" / "manifest.json").is_file()


# --- evaluate ---

def test_evaluate_identical_dirs(tmp_path):
    rng = np.random.default_rng(1)
    for d in ("p", "g"):
        (tmp_path / d).mkdir()
    for i in range(3):
        img = Image(rng.random((24, 24, 3)))
        save_image(img, tmp_path / "p" / f"{i}.png", 8)
        shutil.copy(tmp_path / "p" / f"{i}.png", tmp_path / "g" / f"{i}.png")
    rows = evaluate(tmp_path / "p", tmp_path / "g")
    assert len(rows) == 4  # 3 images + mean
    assert rows[-1]["id"] == "mean"
    for row in rows[:-1]:
        assert row["psnr"] == 100.0
        assert row["ssim"] == pytest.approx(1.0)
        assert row["mae"] == 0.0
        assert row["edge_total"] == 0.0


def test_evaluate_blur_scores_below_identity(tmp_path):
    from scipy.ndimage import gaussian_filter
    rng = np.random.default_rng(2)
    sharp = rng.random((32, 32, 3))
    (tmp_path / "p").mkdir(); (tmp_path / "g").mkdir()
    save_image(Image(np.clip(gaussian_filter(sharp, (2, 2, 0)), 0, 1)),
               tmp_path / "p" / "a.png", 8)
    save_image(Image(sharp), tmp_path / "g" / "a.png", 8)
    rows = evaluate(tmp_path / "p", tmp_path / "g")
    assert rows[0]["psnr"] < 100.0
    assert rows[0]["mae"] > 0.0


def test_evaluate_lists_unmatched(tmp_path):
    (tmp_path / "p").mkdir(); (tmp_path / "g").mkdir()
    save_image(Image(np.zeros((8, 8, 1))), tmp_path / "p" / "only_pred.png", 8)
    save_image(Image(np.zeros((8, 8, 1))), tmp_path / "g" / "only_gt.png", 8)
    with pytest.raises(ValueError, match="only_pred.*only_gt"):
        evaluate(tmp_path / "p", tmp_path / "g")


def test_cli_evaluate_csv(tmp_path):
    (tmp_path / "p").mkdir(); (tmp_path / "g").mkdir()
    img = Image(np.random.default_rng(3).random((16, 16, 3)))
    save_image(img, tmp_path / "p" / "x.png", 8)
    shutil.copy(tmp_path / "p" / "x.png", tmp_path / "g" / "x.png")
    out_csv = tmp_path / "report.csv"
    rc = main(["evaluate", "--pred", str(tmp_path / "p"), "--gt", str(tmp_path / "g"),
               "--out", str(out_csv)])
    assert rc == 0
    lines = out_csv.read_text().strip().splitlines()
    assert lines[0].startswith("id,psnr,ssim,mae,edge_total")
    assert len(lines) == 3  # header + row + mean


# --- psf export / gallery ---

def test_psf_export_files_and_manifest(tmp_path):
    bank = build_bank((3,), (0.4, 0.8), (0.2,), kappa=0.14, radius_grid=(4.0, -4.0))
    manifest = psf_export(bank, tmp_path / "psf")
    assert len(manifest) == 4
    for stem, entry in manifest.items():
        for tag in ("l", "r", "c"):
            path = tmp_path / "psf" / entry["files"][tag]
            assert path.is_file()
        kern, _ = read_pfm(tmp_path / "psf" / entry["files"]["c"])
        assert kern.sum() == pytest.approx(1.0, abs=1e-5)


def test_psf_gallery_mosaic(tmp_path):
    bank = build_bank((3, 6, 9), (0.4, 0.6, 0.8, 1.0), (0.1, 0.2, 0.3, 0.4),
                      kappa=0.14, radius_grid=(6.0,))
    mosaic = psf_gallery(bank, tmp_path / "g")
    assert mosaic.is_file()
    img = load_image(mosaic)
    assert img.data.max() == 1.0  # max-normalized cells
    # 48 entries on a 7x7 sheet
    assert img.width >= 7 * 10


def test_cli_psf_gallery_empty_grid(tmp_path):
    rc = main(["psf", "gallery", "--out", str(tmp_path / "e"), "--n", "",
               "--alpha", "", "--beta", "", "--radius", ""])
    assert rc == 0
    assert (tmp_path / "e" / "gallery.png").is_file()


# --- utility subcommands ---

def test_cli_distort_and_inverse(tmp_path):
    img = Image(np.random.default_rng(4).random((48, 48, 3)))
    save_image(img, tmp_path / "in.png", 8)
    rc = main(["distort", str(tmp_path / "in.png"), str(tmp_path / "d.png"),
               "--preset", "set1"])
    assert rc == 0
    rc = main(["distort", str(tmp_path / "d.png"), str(tmp_path / "u.png"),
               "--preset", "set1", "--inverse"])
    assert rc == 0
    assert (tmp_path / "u.png").is_file()
    rc = main(["distort", str(tmp_path / "in.png"), str(tmp_path / "x.png")])
    assert rc == 2  # neither --coeffs nor --preset


def test_cli_noise_deterministic(tmp_path):
    img = Image(np.full((32, 32, 1), 0.5))
    save_image(img, tmp_path / "in.png", 8)
    for name in ("n1.png", "n2.png"):
        rc = main(["noise", str(tmp_path / "in.png"), str(tmp_path / name),
                   "--sigma", "0.2", "--seed", "9"])
        assert rc == 0
    assert (tmp_path / "n1.png").read_bytes() == (tmp_path / "n2.png").read_bytes()


def test_cli_calib_pattern_and_fit(tmp_path):
    rc = main(["calib", "pattern", "--kind", "disks", "--grid", "3x3",
               "--radius", "4", "--spacing", "18", "--size", "64",
               "--out", str(tmp_path / "pat.png")])
    assert rc == 0
    pat = load_image(tmp_path / "pat.png")
    assert pat.data.max() == 1.0

    # blur the pattern with a known kernel, estimate, and fit parameters
    from dpsynth.psfbank import PsfParams, make_combined_psf
    from scipy.signal import fftconvolve
    truth = make_combined_psf(PsfParams(n=3, alpha=0.6, beta=0.2, kappa=0.14, radius=5.0))
    blurred = np.clip(fftconvolve(pat.data[:, :, 0], truth.taps, mode="same"), 0, 1)
    save_image(Image(blurred[:, :, None]), tmp_path / "blur.png", 16)

    rc = main(["calib", "estimate-psf", "--sharp", str(tmp_path / "pat.png"),
               "--blurred", str(tmp_path / "blur.png"), "--kernel-size", "21",
               "--max-iters", "250", "--out", str(tmp_path / "est.pfm")])
    assert rc == 0
    rc = main(["calib", "fit-psf", "--kernel", str(tmp_path / "est.pfm"),
               "--radius", "2,5,10", "--out", str(tmp_path / "fit.json")])
    assert rc == 0
    fit = json.loads((tmp_path / "fit.json").read_text())
    assert fit["radius"] == 5.0
    assert fit["n"] == 3 and fit["alpha"] == 0.6 and fit["beta"] == 0.2


def test_cli_calib_fit_distortion(tmp_path):
    from dpsynth.calib import make_square_pattern
    from dpsynth.lensfx import distort
    pattern = make_square_pattern((4, 4), 7.0, 18.0, 88)
    save_image(pattern, tmp_path / "pat.png", 16)
    save_image(distort(pattern, (8e-3, 2e-3, 2.2e-3)), tmp_path / "ref.png", 16)
    rc = main(["calib", "fit-distortion", "--reference", str(tmp_path / "ref.png"),
               "--pattern", str(tmp_path / "pat.png"),
               "--c1", "0,8e-3", "--c2", "0,2e-3", "--c3", "0,2.2e-3",
               "--out", str(tmp_path / "coef.json")])
    assert rc == 0
    got = json.loads((tmp_path / "coef.json").read_text())
    assert got["coeffs"] == [8e-3, 2e-3, 2.2e-3]
    assert got["score"] > 0.99


def test_run_frame_task_direct(tmp_path):
    entries = make_inputs(tmp_path, frames=1, size=(40, 50))
    extra = ("cameras:\n"
             "  - {id: c1, focal_length_mm: 50, f_number: 4, focus_distance_m: 5}\n")
    cfg = load_config(write_config(tmp_path, entries, extra=extra))
    task = FrameTask("s0", 0, str(tmp_path / "in" / "0.png"),
                     str(tmp_path / "in" / "0_d.png"), 0)
    entry = run_frame_task(cfg, task)
    assert set(entry["files"]) == {"l", "r", "b", "s", "rd", "meta"}
