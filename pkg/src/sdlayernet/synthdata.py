"""Synthetic layered B-scans with speckle and exact ground-truth surfaces.

Dataset directory layout::

    manifest.json          ids, dims, labeled flags, file names, sha256 checksums
    images/<id>.f32        little-endian float32, row-major H x W
    surfaces/<id>.csv      S rows x W columns of fractional row positions
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MANIFEST = "manifest.json"
FORMAT_VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass
class SynthConfig:
    surfaces: int = 4
    height: int = 64
    width: int = 128
    min_gap: float = 4.0
    max_amplitude: float = 4.0
    min_period: float = 48.0  # columns
    max_period: float = 256.0
    bump_probability: float = 0.5
    intensity_range: tuple[float, float] = (0.15, 1.0)
    speckle_strength: float = 0.6
    labeled_fraction: float = 0.15
    num_samples: int = 200
    bscans_per_volume: int = 10
    val_samples: int = 20
    test_samples: int = 20
    seed: int = 0

    def __post_init__(self):
        self.intensity_range = tuple(float(v) for v in self.intensity_range)
        if not 0.0 <= self.labeled_fraction <= 1.0:
            raise ValueError(f"labeled_fraction must lie in [0, 1], got {self.labeled_fraction}")
        if self.surfaces * self.min_gap >= self.height:
            raise ValueError(
                f"infeasible: {self.surfaces} surfaces x min_gap {self.min_gap} >= height {self.height}"
            )
        if self.surfaces < 1 or self.width < 2 or self.bscans_per_volume < 1:
            raise ValueError("surfaces, width and bscans_per_volume must be positive")


@dataclass
class Sample:
    image: np.ndarray
    surfaces: np.ndarray | None = None
    id: str = ""
    volume: str = ""
    split: str = "train"

    @property
    def labeled(self) -> bool:
        return self.surfaces is not None


def generate_surfaces(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """S smooth ordered curves (S x W) inside [1, H-2] with gaps >= min_gap.

    Each surface is a base depth plus up to three sinusoids and an optional
    Gaussian bump. Ordering is built in by accumulating layer thicknesses.
    With ``max_amplitude == 0`` the surfaces are flat and equally spaced.
    """
    S, H, W, g = cfg.surfaces, cfg.height, cfg.width, cfg.min_gap
    lo, hi = 1.0, H - 2.0
    if (S - 1) * g > hi - lo:
        raise ValueError(f"infeasible: {S} surfaces with min_gap {g} do not fit in height {H}")
    cols = np.arange(W, dtype=np.float64)
    amp = cfg.max_amplitude

    def undulation(scale):
        out = np.zeros(W)
        if amp == 0:
            return out
        for _ in range(rng.integers(1, 4)):
            period = rng.uniform(cfg.min_period, cfg.max_period)
            out += rng.uniform(0, scale) * np.sin(2 * np.pi * cols / period + rng.uniform(0, 2 * np.pi))
        return out

    span = hi - lo
    spacing = span / (S + 1)
    # shared shape (tilt/curvature of the whole retina) plus per-boundary thickness changes
    top = lo + spacing + undulation(amp)
    thickness = [np.full(W, spacing) + undulation(amp / 3) for _ in range(S - 1)]
    if amp > 0 and rng.random() < cfg.bump_probability:
        # drusen-like bump: lifts the upper layers, thins the layer above the bottom surface
        centre, width = rng.uniform(0, W), rng.uniform(4, W / 8)
        bump = rng.uniform(0.5, 1.5) * amp * np.exp(-0.5 * ((cols - centre) / width) ** 2)
        top = top - bump
        if thickness:
            thickness[-1] = thickness[-1] - bump
    thickness = [np.maximum(t, g) for t in thickness]

    y = np.empty((S, W))
    y[0] = np.clip(top, lo, hi - (S - 1) * g)
    for s in range(1, S):
        y[s] = y[s - 1] + thickness[s - 1]
    # squeeze the slack above min_gap where the stack overruns the bottom
    over = y[-1] - hi
    if S > 1 and (over > 0).any():
        slack = y[-1] - y[0] - (S - 1) * g
        keep = np.where(over > 0, 1.0 - over / np.maximum(slack, 1e-12), 1.0)
        for s in range(1, S):
            extra = (thickness[s - 1] - g) * keep
            y[s] = y[s - 1] + g + extra
    return np.clip(y, lo, hi)


def _layer_intensities(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    lo, hi = cfg.intensity_range
    levels = np.linspace(lo, hi, cfg.surfaces + 1)
    step = (hi - lo) / max(cfg.surfaces, 1)
    levels = levels + rng.uniform(-0.25, 0.25, levels.shape) * step
    # adjacent regions must differ, otherwise a boundary is invisible
    for _ in range(100):
        perm = rng.permutation(levels)
        if np.all(np.abs(np.diff(perm)) > 0.5 * step):
            return perm
    return levels


def render_bscan(surfaces: np.ndarray, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Piecewise-constant layers, linear blend within half a pixel of each boundary,
    multiplicative speckle, then standardization to zero mean and unit variance."""
    H = cfg.height
    levels = _layer_intensities(cfg, rng)
    r = np.arange(H, dtype=np.float64)[:, None]
    img = np.full((H, surfaces.shape[1]), levels[0])
    for s in range(surfaces.shape[0]):
        frac = np.clip(r - surfaces[s][None, :] + 0.5, 0.0, 1.0)
        img = img + (levels[s + 1] - levels[s]) * frac
    if cfg.speckle_strength > 0:
        noise = rng.exponential(1.0, img.shape)  # mean one, like intensity speckle
        img = img * (1.0 + cfg.speckle_strength * (noise - 1.0))
    img = (img - img.mean()) / max(img.std(), 1e-12)
    return img.astype(np.float32)


def generate_dataset(cfg: SynthConfig) -> list[Sample]:
    """Training pool (partly labeled) followed by fully labeled val and test splits.

    Samples are grouped into volumes of ``bscans_per_volume`` consecutive
    B-scans; every sample has its own derived seed.
    """
    seeds = np.random.SeedSequence(cfg.seed)
    n_total = cfg.num_samples + cfg.val_samples + cfg.test_samples
    children = seeds.spawn(n_total + 1)
    label_rng = np.random.default_rng(children[-1])
    n_labeled = int(np.floor(cfg.labeled_fraction * cfg.num_samples + 0.5))
    labeled = np.zeros(cfg.num_samples, dtype=bool)
    labeled[label_rng.choice(cfg.num_samples, n_labeled, replace=False)] = True

    samples = []
    for k in range(n_total):
        rng = np.random.default_rng(children[k])
        surf = generate_surfaces(cfg, rng)
        img = render_bscan(surf, cfg, rng)
        if k < cfg.num_samples:
            split, idx, keep = "train", k, labeled[k]
        elif k < cfg.num_samples + cfg.val_samples:
            split, idx, keep = "val", k - cfg.num_samples, True
        else:
            split, idx, keep = "test", k - cfg.num_samples - cfg.val_samples, True
        vol = f"{split}{idx // cfg.bscans_per_volume:03d}"
        samples.append(
            Sample(img, surf if keep else None, f"{vol}_b{idx % cfg.bscans_per_volume:02d}", vol, split)
        )
    return samples


def hflip(image: np.ndarray, surfaces: np.ndarray | None):
    """Mirror a B-scan and its surfaces left-right."""
    image = image[..., ::-1].copy()
    if surfaces is not None:
        surfaces = surfaces[..., ::-1].copy()
    return image, surfaces


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _surface_text(surfaces: np.ndarray) -> bytes:
    rows = [",".join(repr(float(v)) for v in row) for row in surfaces]
    return ("\n".join(rows) + "\n").encode()


def write_dataset(samples: Sequence[Sample], directory: str | Path) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "surfaces").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        img = np.ascontiguousarray(s.image, dtype="<f4")
        raw = img.tobytes()
        entry = {
            "id": s.id,
            "volume": s.volume,
            "split": s.split,
            "height": int(img.shape[0]),
            "width": int(img.shape[1]),
            "labeled": s.labeled,
            "image": f"images/{s.id}.f32",
            "image_sha256": _sha256(raw),
        }
        (directory / entry["image"]).write_bytes(raw)
        if s.labeled:
            text = _surface_text(np.asarray(s.surfaces, dtype=np.float64))
            entry.update(
                surfaces=f"surfaces/{s.id}.csv",
                num_surfaces=int(s.surfaces.shape[0]),
                surfaces_sha256=_sha256(text),
            )
            (directory / entry["surfaces"]).write_bytes(text)
        entries.append(entry)
    manifest = {"format": FORMAT_VERSION, "samples": entries}
    tmp = directory / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1))
    tmp.replace(directory / MANIFEST)
    return directory / MANIFEST


def read_dataset(directory: str | Path) -> list[Sample]:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.is_file():
        raise DatasetError(f"no {MANIFEST} in {directory}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != FORMAT_VERSION:
        raise DatasetError(f"{path}: unsupported format {manifest.get('format')!r}")
    samples = []
    for e in manifest["samples"]:
        raw = (directory / e["image"]).read_bytes()
        H, W = e["height"], e["width"]
        if len(raw) != 4 * H * W:
            raise DatasetError(
                f"{e['image']}: shape error, {len(raw)} bytes cannot hold a {H}x{W} float32 image"
            )
        if _sha256(raw) != e["image_sha256"]:
            raise DatasetError(f"{e['image']}: checksum mismatch")
        image = np.frombuffer(raw, dtype="<f4").reshape(H, W).astype(np.float32)
        surfaces = None
        if e["labeled"]:
            text = (directory / e["surfaces"]).read_bytes()
            if _sha256(text) != e["surfaces_sha256"]:
                raise DatasetError(f"{e['surfaces']}: checksum mismatch")
            surfaces = np.array(
                [[float(v) for v in line.split(",")] for line in text.decode().splitlines() if line],
                dtype=np.float64,
            )
            if surfaces.shape != (e["num_surfaces"], W):
                raise DatasetError(
                    f"{e['surfaces']}: shape error, expected {(e['num_surfaces'], W)}, got {surfaces.shape}"
                )
        samples.append(Sample(image, surfaces, e["id"], e["volume"], e.get("split", "train")))
    return samples
