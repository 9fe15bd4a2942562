"""Generation config: schema, YAML loading, validation, stock presets."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .optics import CameraConfig, InvalidCameraError
from .lensfx import DISTORTION_PRESETS


class ConfigError(ValueError):
    """Invalid or incomplete generation config; message names the entry."""


@dataclass(frozen=True)
class FramePair:
    image: Path
    depth: Path


@dataclass(frozen=True)
class SequenceSpec:
    sequence_id: str
    frames: tuple[FramePair, ...]


@dataclass(frozen=True)
class DepthOptions:
    format: str = "png16"       # png16 | pfm
    scale: float = 0.01         # meters per code for png16
    zero_sentinel: float = 1000.0

    def __post_init__(self):
        if self.format not in ("png16", "pfm"):
            raise ConfigError(f"depth.format must be png16 or pfm, got {self.format!r}")
        if self.scale <= 0:
            raise ConfigError(f"depth.scale must be positive, got {self.scale}")


@dataclass(frozen=True)
class PsfGridConfig:
    n: tuple[int, ...] = (3, 6, 9)
    alpha: tuple[float, ...] = (0.4, 0.6, 0.8, 1.0)
    beta: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4)
    kappa: float = 0.14

    def shape_combinations(self) -> list[tuple[int, float, float]]:
        return [(n, a, b) for n in self.n for a in self.alpha for b in self.beta]


def default_sigma_grid() -> tuple[float, ...]:
    """Noise strengths 0.05 to 0.5 in steps of 0.005."""
    return tuple(float(round(v, 4)) for v in np.linspace(0.05, 0.5, 91))


def default_cameras() -> tuple[CameraConfig, ...]:
    """Five stock camera sets paired with the stock distortion presets.

    Focus distances span 6 to 30 m and focal lengths 40 to 220 mm so the
    blur radii land in the useful 5-40 px band at street-scene depths
    with the default 100 px/mm sensor sampling.
    """
    specs = [
        ("cam1", 40.0, 5.0, 6.0, "set1"),
        ("cam2", 50.0, 8.0, 6.0, "set2"),
        ("cam3", 70.0, 5.0, 8.0, "set3"),
        ("cam4", 100.0, 13.0, 12.0, "set4"),
        ("cam5", 220.0, 10.0, 30.0, "set5"),
    ]
    return tuple(CameraConfig(focal_length_mm=f, f_number=fn, focus_distance_m=s,
                              pixels_per_mm=100.0,
                              distortion_coeffs=DISTORTION_PRESETS[preset],
                              cam_id=cid)
                 for cid, f, fn, s, preset in specs)


@dataclass(frozen=True)
class GenerationConfig:
    sequences: tuple[SequenceSpec, ...]
    output_dir: Path
    cameras: tuple[CameraConfig, ...] = field(default_factory=default_cameras)
    psf_grids: PsfGridConfig = field(default_factory=PsfGridConfig)
    sigma_grid: tuple[float, ...] = field(default_factory=default_sigma_grid)
    depth: DepthOptions = field(default_factory=DepthOptions)
    master_seed: int = 0
    bit_depth: int = 8
    max_layers: int = 500

    def __post_init__(self):
        if self.bit_depth not in (8, 16):
            raise ConfigError(f"bit_depth must be 8 or 16, got {self.bit_depth}")
        if self.max_layers < 1:
            raise ConfigError(f"max_layers must be >= 1, got {self.max_layers}")
        if any(s < 0 for s in self.sigma_grid):
            raise ConfigError("sigma grid contains negative values")
        if not self.sigma_grid:
            raise ConfigError("sigma grid is empty")

    def validate_inputs(self) -> None:
        """Check that every referenced input file exists."""
        for seq in self.sequences:
            for i, fr in enumerate(seq.frames):
                for kind, p in (("image", fr.image), ("depth", fr.depth)):
                    if not Path(p).is_file():
                        raise ConfigError(
                            f"manifest entry {seq.sequence_id}[{i}]: {kind} not found: {p}")


PRESETS = ("paper-synthia",)


def preset_config(name: str, sequences=(), output_dir: Path = Path("out")) -> GenerationConfig:
    """Named preset with the stock cameras, PSF grids, and noise range."""
    if name != "paper-synthia":
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    return GenerationConfig(sequences=tuple(sequences), output_dir=Path(output_dir))


# ---------------------------------------------------------------------------
# YAML loading
# ---------------------------------------------------------------------------

def _parse_sequences(raw, base: Path) -> tuple[SequenceSpec, ...]:
    if raw is None:
        return ()
    seqs = []
    for si, entry in enumerate(raw):
        if not isinstance(entry, dict) or "frames" not in entry:
            raise ConfigError(f"manifest entry {si}: expected mapping with 'frames'")
        sid = str(entry.get("sequence", f"seq{si:02d}"))
        frames = []
        for fi, fr in enumerate(entry["frames"]):
            try:
                img = base / str(fr["image"])
                dep = base / str(fr["depth"])
            except (KeyError, TypeError):
                raise ConfigError(
                    f"manifest entry {sid}[{fi}]: needs 'image' and 'depth' paths")
            frames.append(FramePair(image=img, depth=dep))
        seqs.append(SequenceSpec(sequence_id=sid, frames=tuple(frames)))
    return tuple(seqs)


def _parse_cameras(raw) -> tuple[CameraConfig, ...]:
    cams = []
    for ci, c in enumerate(raw):
        coeffs = c.get("distortion", (0.0, 0.0, 0.0))
        if isinstance(coeffs, str):
            if coeffs not in DISTORTION_PRESETS:
                raise ConfigError(f"camera {ci}: unknown distortion preset {coeffs!r}")
            coeffs = DISTORTION_PRESETS[coeffs]
        try:
            cams.append(CameraConfig(
                focal_length_mm=float(c["focal_length_mm"]),
                f_number=float(c["f_number"]),
                focus_distance_m=float(c["focus_distance_m"]),
                pixels_per_mm=float(c.get("pixels_per_mm", 100.0)),
                distortion_coeffs=tuple(float(v) for v in coeffs),
                cam_id=str(c.get("id", f"cam{ci + 1}"))))
        except KeyError as exc:
            raise ConfigError(f"camera {ci}: missing field {exc}")
        except InvalidCameraError as exc:
            raise ConfigError(f"camera {ci}: {exc}")
    return tuple(cams)


def config_from_dict(doc: dict, base: Path) -> GenerationConfig:
    doc = dict(doc or {})
    preset = doc.pop("preset", None)
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; available: {', '.join(PRESETS)}")

    kwargs: dict = {}
    kwargs["sequences"] = _parse_sequences(doc.get("manifest"), base)
    out = doc.get("output_dir", "out")
    kwargs["output_dir"] = (base / out) if not Path(out).is_absolute() else Path(out)
    if "cameras" in doc:
        kwargs["cameras"] = _parse_cameras(doc["cameras"])
    if "psf" in doc:
        p = doc["psf"]
        kwargs["psf_grids"] = PsfGridConfig(
            n=tuple(int(v) for v in p.get("n", (3, 6, 9))),
            alpha=tuple(float(v) for v in p.get("alpha", (0.4, 0.6, 0.8, 1.0))),
            beta=tuple(float(v) for v in p.get("beta", (0.1, 0.2, 0.3, 0.4))),
            kappa=float(p.get("kappa", 0.14)))
    if "sigma_grid" in doc:
        kwargs["sigma_grid"] = tuple(float(v) for v in doc["sigma_grid"])
    if "depth" in doc:
        d = doc["depth"]
        kwargs["depth"] = DepthOptions(
            format=str(d.get("format", "png16")),
            scale=float(d.get("scale", 0.01)),
            zero_sentinel=float(d.get("zero_sentinel", 1000.0)))
    for key, cast in (("seed", int), ("bit_depth", int), ("max_layers", int)):
        if key in doc:
            kwargs["master_seed" if key == "seed" else key] = cast(doc[key])
    try:
        return GenerationConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc))


def load_config(path) -> GenerationConfig:
    """Parse a YAML config file; relative paths resolve against its folder."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}")
    if doc is not None and not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(doc or {}, path.parent)


def override(cfg: GenerationConfig, **kw) -> GenerationConfig:
    """Functional update used by CLI flag overrides."""
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
