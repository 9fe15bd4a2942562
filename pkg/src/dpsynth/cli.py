"""Batch dataset generator, evaluation harness, and utility subcommands.

Outputs per input frame and camera set are a quintet, named
``<seq>/<frame>_<camset>_{l,r,b,s,rd}.png`` plus a JSON sidecar: left and
right views, their sum (the combined blurred image), the sharp reference,
and the radial-distance channel. Per-frame random choices (PSF shape,
noise strength) come from a counter-based generator keyed by the master
seed, sequence id, and frame index, so results are byte-identical no
matter how many workers run or which frames are re-run.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import calib, lensfx, metrics
from .config import (ConfigError, GenerationConfig, load_config, override,
                     preset_config)
from .imgcore import Image, load_depth, load_image, save_image, write_pfm, read_pfm
from .lensfx import DISTORTION_PRESETS, NoiseConfig, add_signal_noise, distort, undistort
from .psfbank import PsfBank, build_bank
from .render import radial_distance_map, render_dp_frame

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FrameTask:
    sequence_id: str
    frame_index: int
    image_path: str
    depth_path: str
    camera_index: int


_BANKS: dict[float, PsfBank] = {}  # per-process kernel cache


def _bank_for(kappa: float) -> PsfBank:
    bank = _BANKS.get(kappa)
    if bank is None:
        bank = _BANKS[kappa] = PsfBank(kappa)
    return bank


def _frame_draws(cfg: GenerationConfig, seq_id: str, frame_index: int):
    """Per-frame randomized choices, identical for every camera set."""
    rng = lensfx.derive_rng(cfg.master_seed, ("frame-params", seq_id, frame_index))
    combos = cfg.psf_grids.shape_combinations()
    n, alpha, beta = combos[int(rng.integers(len(combos)))]
    sigma = cfg.sigma_grid[int(rng.integers(len(cfg.sigma_grid)))]
    return (n, alpha, beta), sigma


def run_frame_task(cfg: GenerationConfig, task: FrameTask) -> dict:
    """Render, distort, and noise one (frame, camera) pair; write its quintet."""
    cam = cfg.cameras[task.camera_index]
    sharp = load_image(task.image_path)
    depth = load_depth(task.depth_path, scale=cfg.depth.scale, format=cfg.depth.format,
                       zero_sentinel=cfg.depth.zero_sentinel)
    (n, alpha, beta), sigma = _frame_draws(cfg, task.sequence_id, task.frame_index)

    frame = render_dp_frame(sharp, depth, cam, n, alpha, beta,
                            _bank_for(cfg.psf_grids.kappa), max_layers=cfg.max_layers)
    left = distort(frame.left, cam.distortion_coeffs)
    right = distort(frame.right, cam.distortion_coeffs)
    sharp_out = distort(frame.sharp, cam.distortion_coeffs)

    noise_cfg = NoiseConfig(sigma=sigma, seed=cfg.master_seed)
    stream = (task.sequence_id, task.frame_index, cam.cam_id)
    left = add_signal_noise(left, noise_cfg, stream + ("l",))
    right = add_signal_noise(right, noise_cfg, stream + ("r",))
    combined = Image(np.clip(left.data + right.data, 0.0, 1.0))

    stem = f"{task.frame_index:04d}_{cam.cam_id}"
    seq_dir = Path(cfg.output_dir) / task.sequence_id
    files = {}
    outputs = {"l": left, "r": right, "b": combined, "s": sharp_out,
               "rd": radial_distance_map(sharp.width, sharp.height)}
    for tag, img in outputs.items():
        rel = f"{task.sequence_id}/{stem}_{tag}.png"
        save_image(img, seq_dir / f"{stem}_{tag}.png", bit_depth=cfg.bit_depth)
        files[tag] = rel

    entry = {
        "sequence": task.sequence_id,
        "frame_index": task.frame_index,
        "camera": cam.cam_id,
        "source_image": str(task.image_path),
        "source_depth": str(task.depth_path),
        "psf": {"n": n, "alpha": alpha, "beta": beta, "kappa": cfg.psf_grids.kappa},
        "sigma": sigma,
        "seed": cfg.master_seed,
        "files": files,
    }
    sidecar = seq_dir / f"{stem}.json"
    sidecar.parent.mkdir(parents=True, exist_ok=True)
    sidecar.write_text(json.dumps(entry, indent=2, sort_keys=True) + "\n")
    entry["files"]["meta"] = f"{task.sequence_id}/{stem}.json"
    return entry


def _run_frame_task_star(args):
    cfg, task = args
    try:
        return ("ok", task, run_frame_task(cfg, task))
    except Exception as exc:  # per-frame isolation: batch runs keep going
        return ("error", task, f"{type(exc).__name__}: {exc}")


@dataclass
class GenerateReport:
    entries: list
    failures: list

    @property
    def ok(self) -> bool:
        return not self.failures


def generate(cfg: GenerationConfig, jobs: int = 1) -> GenerateReport:
    """Run the full batch: every manifest frame times every camera set.

    Deterministic for a fixed config and seed regardless of job count.
    Per-frame failures are recorded and skipped; completed work stays on
    disk. A manifest.json listing every output is always written.
    """
    cfg.validate_inputs()
    tasks = [FrameTask(seq.sequence_id, fi, str(fr.image), str(fr.depth), ci)
             for seq in cfg.sequences
             for fi, fr in enumerate(seq.frames)
             for ci in range(len(cfg.cameras))]

    results = []
    if jobs <= 1 or len(tasks) <= 1:
        results = [_run_frame_task_star((cfg, t)) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_frame_task_star, ((cfg, t) for t in tasks)))

    entries, failures = [], []
    for status, task, payload in results:
        if status == "ok":
            entries.append(payload)
        else:
            log.error("frame %s[%d] %s failed: %s", task.sequence_id, task.frame_index,
                      cfg.cameras[task.camera_index].cam_id, payload)
            failures.append({"sequence": task.sequence_id, "frame_index": task.frame_index,
                             "camera": cfg.cameras[task.camera_index].cam_id,
                             "error": payload})
    entries.sort(key=lambda e: (e["sequence"], e["frame_index"], e["camera"]))
    failures.sort(key=lambda e: (e["sequence"], e["frame_index"], e["camera"]))

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"seed": cfg.master_seed, "bit_depth": cfg.bit_depth,
                "entries": entries, "failures": failures}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return GenerateReport(entries=entries, failures=failures)


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def evaluate(pred_dir, gt_dir, edge_cfg: metrics.EdgeLossConfig | None = None) -> list[dict]:
    """Score every matching image pair; returns per-image rows plus a mean row."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    pred = {str(p.relative_to(pred_dir)): p for p in sorted(pred_dir.rglob("*.png"))}
    gt = {str(p.relative_to(gt_dir)): p for p in sorted(gt_dir.rglob("*.png"))}
    missing_gt = sorted(set(pred) - set(gt))
    missing_pred = sorted(set(gt) - set(pred))
    if missing_gt or missing_pred:
        raise ValueError(
            "unmatched ids; only in pred: %s; only in gt: %s" % (missing_gt, missing_pred))
    edge_cfg = edge_cfg or metrics.EdgeLossConfig()
    rows = []
    for key in sorted(pred):
        a = load_image(pred[key])
        b = load_image(gt[key])
        el = metrics.edge_loss(a, b, edge_cfg)
        rows.append({"id": key, "psnr": metrics.psnr(a, b), "ssim": metrics.ssim(a, b),
                     "mae": metrics.mae(a, b), "edge_total": el.total, "edge_mse": el.mse,
                     "edge_x": el.grad_x, "edge_y": el.grad_y})
    if rows:
        mean = {"id": "mean"}
        for col in ("psnr", "ssim", "mae", "edge_total", "edge_mse", "edge_x", "edge_y"):
            mean[col] = float(np.mean([r[col] for r in rows]))
        rows.append(mean)
    return rows


def write_report(rows: list[dict], stream) -> None:
    writer = csv.DictWriter(stream, fieldnames=["id", "psnr", "ssim", "mae",
                                                "edge_total", "edge_mse", "edge_x", "edge_y"])
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v)
                         for k, v in row.items()})


# ---------------------------------------------------------------------------
# psf export / gallery
# ---------------------------------------------------------------------------

def _entry_stem(psf) -> str:
    p = psf.params
    return f"n{p.n}_a{p.alpha:g}_b{p.beta:g}_r{p.radius:+g}"


def psf_export(bank: PsfBank, outdir) -> dict:
    """Write every bank entry (left/right/combined) as PFM plus a manifest."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for psf in bank.entries():
        stem = _entry_stem(psf)
        names = {}
        for tag, kern in (("l", psf.left), ("r", psf.right), ("c", psf.combined)):
            name = f"{stem}_{tag}.pfm"
            write_pfm(outdir / name, kern.taps)
            names[tag] = name
        p = psf.params
        manifest[stem] = {"n": p.n, "alpha": p.alpha, "beta": p.beta,
                          "kappa": p.kappa, "radius": p.radius, "files": names}
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def psf_gallery(bank: PsfBank, outdir) -> Path:
    """PFM export plus an 8-bit contact sheet of max-normalized kernels."""
    outdir = Path(outdir)
    psf_export(bank, outdir)
    entries = sorted(bank.entries(), key=lambda e: (e.params.n, e.params.alpha,
                                                    e.params.beta, e.params.radius))
    count = len(entries)
    mosaic_path = outdir / "gallery.png"
    if count == 0:
        save_image(Image(np.zeros((1, 1, 1))), mosaic_path, bit_depth=8)
        return mosaic_path
    cell = max(e.combined.size for e in entries) + 2
    cols = int(np.ceil(np.sqrt(count)))
    rows = int(np.ceil(count / cols))
    sheet = np.zeros((rows * cell, cols * cell))
    for i, e in enumerate(entries):
        taps = e.combined.taps
        peak = taps.max()
        norm = taps / peak if peak > 0 else taps
        r0 = (i // cols) * cell + (cell - taps.shape[0]) // 2
        c0 = (i % cols) * cell + (cell - taps.shape[1]) // 2
        sheet[r0:r0 + taps.shape[0], c0:c0 + taps.shape[1]] = norm
    save_image(Image(sheet[:, :, None]), mosaic_path, bit_depth=8)
    return mosaic_path


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _parse_grid(text: str) -> tuple[int, int]:
    rows, _, cols = text.lower().partition("x")
    return int(rows), int(cols)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dpsynth",
                                 description="Dual-pixel defocus data generator and tools")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="run the batch dataset generator")
    g.add_argument("--config", help="YAML config file")
    g.add_argument("--preset", choices=["paper-synthia"],
                   help="start from a named preset instead of a config file")
    g.add_argument("--seed", type=int, help="override the master seed")
    g.add_argument("--jobs", type=int, default=1)
    g.add_argument("--out", help="override the output directory")
    g.add_argument("--bit-depth", type=int, choices=(8, 16), dest="bit_depth")

    e = sub.add_parser("evaluate", help="score generated images against references")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", help="CSV output path (default: stdout)")

    p = sub.add_parser("psf", help="PSF bank tools")
    psub = p.add_subparsers(dest="psf_command", required=True)
    for name in ("export", "gallery"):
        pp = psub.add_parser(name)
        pp.add_argument("--out", required=True)
        pp.add_argument("--n", default="3,6,9")
        pp.add_argument("--alpha", default="0.4,0.6,0.8,1.0")
        pp.add_argument("--beta", default="0.1,0.2,0.3,0.4")
        pp.add_argument("--kappa", type=float, default=0.14)
        pp.add_argument("--radius", default="10")

    c = sub.add_parser("calib", help="calibration tools")
    csub = c.add_subparsers(dest="calib_command", required=True)

    cp = csub.add_parser("pattern")
    cp.add_argument("--kind", choices=("disks", "squares"), default="disks")
    cp.add_argument("--grid", type=_parse_grid, default=(6, 6))
    cp.add_argument("--radius", type=float, default=6.0, help="disk radius in px")
    cp.add_argument("--side", type=float, default=12.0, help="square side in px")
    cp.add_argument("--spacing", type=float, default=32.0)
    cp.add_argument("--size", type=int, default=256)
    cp.add_argument("--out", required=True)

    ce = csub.add_parser("estimate-psf")
    ce.add_argument("--sharp", required=True)
    ce.add_argument("--blurred", required=True)
    ce.add_argument("--kernel-size", type=int, default=31, dest="kernel_size")
    ce.add_argument("--l1-weight", type=float, default=1e-3, dest="l1_weight")
    ce.add_argument("--max-iters", type=int, default=500, dest="max_iters")
    ce.add_argument("--out", required=True, help="output PFM kernel path")

    cf = csub.add_parser("fit-psf")
    cf.add_argument("--kernel", required=True, help="PFM kernel to fit")
    cf.add_argument("--radius", default="2,5,10,20",
                    help="candidate radii (comma separated, signed)")
    cf.add_argument("--kappa", type=float, default=0.14)
    cf.add_argument("--out", help="JSON output path (default: stdout)")

    cd = csub.add_parser("fit-distortion")
    cd.add_argument("--reference", required=True)
    cd.add_argument("--pattern", required=True)
    cd.add_argument("--c1", default="-8e-3,-4e-3,0,8e-3,2e-2")
    cd.add_argument("--c2", default="-5e-3,-3.8e-3,0,2e-3,2e-2,9e-4")
    cd.add_argument("--c3", default="-4.5e-3,-3.6e-3,-9e-4,0,2.2e-3,3e-2")
    cd.add_argument("--out", help="JSON output path (default: stdout)")

    d = sub.add_parser("distort", help="apply (or invert) radial distortion")
    d.add_argument("input")
    d.add_argument("output")
    d.add_argument("--coeffs", help="c1,c2,c3")
    d.add_argument("--preset", choices=sorted(DISTORTION_PRESETS))
    d.add_argument("--inverse", action="store_true")
    d.add_argument("--bit-depth", type=int, choices=(8, 16), default=8, dest="bit_depth")

    n = sub.add_parser("noise", help="add signal-dependent noise")
    n.add_argument("input")
    n.add_argument("output")
    n.add_argument("--sigma", type=float, required=True)
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--stream", default="", help="extra stream label")
    n.add_argument("--bit-depth", type=int, choices=(8, 16), default=8, dest="bit_depth")

    return ap


def _grids_from_args(args) -> tuple:
    return (tuple(int(v) for v in _parse_floats(args.n)),
            _parse_floats(args.alpha), _parse_floats(args.beta),
            args.kappa, _parse_floats(args.radius))


def _cmd_generate(args) -> int:
    if args.config:
        cfg = load_config(args.config)
    elif args.preset:
        cfg = preset_config(args.preset)
    else:
        raise ConfigError("generate needs --config or --preset")
    cfg = override(cfg,
                   master_seed=args.seed,
                   output_dir=Path(args.out) if args.out else None,
                   bit_depth=args.bit_depth)
    report = generate(cfg, jobs=args.jobs)
    print(f"generated {len(report.entries)} quintet(s), {len(report.failures)} failure(s)")
    return EXIT_OK if report.ok else EXIT_PARTIAL


def _cmd_evaluate(args) -> int:
    rows = evaluate(args.pred, args.gt)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_report(rows, fh)
    else:
        write_report(rows, sys.stdout)
    return EXIT_OK


def _cmd_psf(args) -> int:
    n, alpha, beta, kappa, radius = _grids_from_args(args)
    if all((n, alpha, beta, radius)):
        bank = build_bank(n, alpha, beta, kappa, radius)
    else:
        bank = PsfBank(kappa)  # empty grid: valid, produces an empty export
    if args.psf_command == "export":
        psf_export(bank, args.out)
    else:
        psf_gallery(bank, args.out)
    print(f"wrote {len(bank)} PSF entr(ies) to {args.out}")
    return EXIT_OK


def _cmd_calib(args) -> int:
    if args.calib_command == "pattern":
        if args.kind == "disks":
            img = calib.make_disk_pattern(args.grid, args.radius, args.spacing, args.size)
        else:
            img = calib.make_square_pattern(args.grid, args.side, args.spacing, args.size)
        save_image(img, args.out, bit_depth=8)
        return EXIT_OK
    if args.calib_command == "estimate-psf":
        sharp = load_image(args.sharp)
        blurred = load_image(args.blurred)
        est = calib.estimate_psf(sharp, blurred, args.kernel_size,
                                 l1_weight=args.l1_weight, max_iters=args.max_iters)
        write_pfm(args.out, est.kernel.taps)
        print(f"objective {est.residual:.6g} after {est.iterations} iteration(s); "
              f"converged={est.converged}")
        return EXIT_OK
    if args.calib_command == "fit-psf":
        kernel, _ = read_pfm(args.kernel)
        grids = calib.default_shape_grids(radius=_parse_floats(args.radius))
        if args.kappa != 0.14:
            grids = calib.ParamGrids(n=grids.n, alpha=grids.alpha, beta=grids.beta,
                                     kappa=(args.kappa,), radius=grids.radius)
        params, obj = calib.fit_psf_params(kernel, grids)
        payload = json.dumps({"n": params.n, "alpha": params.alpha, "beta": params.beta,
                              "kappa": params.kappa, "radius": params.radius,
                              "objective": obj}, indent=2, sort_keys=True)
        Path(args.out).write_text(payload + "\n") if args.out else print(payload)
        return EXIT_OK
    if args.calib_command == "fit-distortion":
        reference = load_image(args.reference)
        pattern = load_image(args.pattern)
        coeffs, score = calib.fit_distortion_coeffs(
            reference, pattern,
            (_parse_floats(args.c1), _parse_floats(args.c2), _parse_floats(args.c3)))
        payload = json.dumps({"coeffs": list(coeffs), "score": score}, indent=2, sort_keys=True)
        Path(args.out).write_text(payload + "\n") if args.out else print(payload)
        return EXIT_OK
    raise ConfigError(f"unknown calib command {args.calib_command!r}")


def _cmd_distort(args) -> int:
    if (args.coeffs is None) == (args.preset is None):
        raise ConfigError("distort needs exactly one of --coeffs or --preset")
    coeffs = DISTORTION_PRESETS[args.preset] if args.preset else _parse_floats(args.coeffs)
    if len(coeffs) != 3:
        raise ConfigError(f"expected three coefficients, got {len(coeffs)}")
    img = load_image(args.input)
    out = undistort(img, coeffs) if args.inverse else distort(img, coeffs)
    save_image(out, args.output, bit_depth=args.bit_depth)
    return EXIT_OK


def _cmd_noise(args) -> int:
    img = load_image(args.input)
    cfg = NoiseConfig(sigma=args.sigma, seed=args.seed)
    stream = (args.stream,) if args.stream else ()
    save_image(add_signal_noise(img, cfg, stream), args.output, bit_depth=args.bit_depth)
    return EXIT_OK


_COMMANDS = {
    "generate": _cmd_generate,
    "evaluate": _cmd_evaluate,
    "psf": _cmd_psf,
    "calib": _cmd_calib,
    "distort": _cmd_distort,
    "noise": _cmd_noise,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
