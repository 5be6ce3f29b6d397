"""Command-line entry point: ``sdlayernet {synth,train,eval,segment,inspect-factors}``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import ConfigError, RunConfig, dump_config, load_config
from .networks import load_checkpoint
from .synthdata import DatasetError, generate_dataset, read_dataset, write_dataset
from .trainer import evaluate, predict, train

log = logging.getLogger("sdlayernet")

SURFACE_COLOURS = [(255, 64, 64), (255, 200, 0), (64, 160, 255), (200, 64, 255), (255, 128, 0), (0, 200, 200)]


class RunManifest:
    """Collects outputs of one command and writes ``run_manifest.json`` atomically."""

    def __init__(self, command: str, out_dir: Path, config: dict | None, seed: int | None):
        self.out_dir = out_dir
        self.data = {
            "command": command,
            "argv": sys.argv[1:],
            "config": config,
            "seed": seed,
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        }
        self.outputs: list[Path] = []

    def add(self, *paths: Path) -> None:
        self.outputs.extend(paths)

    def write(self) -> Path:
        self.data["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.data["outputs"] = {
            str(p.relative_to(self.out_dir)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(set(self.outputs))
        }
        path = self.out_dir / "run_manifest.json"
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.data, indent=1, default=str))
        tmp.replace(path)
        return path


def _config(args, extra: dict | None = None) -> RunConfig:
    overrides = dict(extra or {})
    if getattr(args, "seed", None) is not None:
        overrides["synth.seed"] = args.seed
        overrides["train.seed"] = args.seed
    return load_config(args.config, overrides)


def _to_uint8(img: np.ndarray) -> np.ndarray:
    lo, hi = float(img.min()), float(img.max())
    return ((img - lo) / max(hi - lo, 1e-12) * 255).round().astype(np.uint8)


def overlay(image: np.ndarray, predicted: np.ndarray, reference: np.ndarray | None) -> Image.Image:
    """Grayscale B-scan with reference surfaces in green and predictions in colour."""
    rgb = np.repeat(_to_uint8(image)[..., None], 3, axis=-1)
    H, W = image.shape
    cols = np.arange(W)
    if reference is not None:
        for s in reference:
            rgb[np.clip(np.floor(s + 0.5).astype(int), 0, H - 1), cols] = (0, 255, 0)
    for k, s in enumerate(predicted):
        rgb[np.clip(np.floor(s + 0.5).astype(int), 0, H - 1), cols] = SURFACE_COLOURS[k % len(SURFACE_COLOURS)]
    return Image.fromarray(rgb)


def _select(samples, split):
    chosen = [s for s in samples if s.split == split] if split != "all" else list(samples)
    if not chosen:
        raise DatasetError(f"no samples in split {split!r}")
    return chosen


def _check_surfaces(model, samples):
    S = model.cfg.surfaces
    for s in samples:
        if s.labeled and s.surfaces.shape[0] != S:
            raise ValueError(
                f"checkpoint segments {S} surfaces but sample {s.id} has {s.surfaces.shape[0]}"
            )


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest("synth", out, cfg.as_dict()["synth"], cfg.synth.seed)
    samples = generate_dataset(cfg.synth)
    write_dataset(samples, out)
    man.add(out / "manifest.json", *sorted((out / "images").iterdir()), *sorted((out / "surfaces").iterdir()))
    man.write()
    n_lab = sum(s.labeled for s in samples if s.split == "train")
    log.info("wrote %d samples (%d training, %d labeled) to %s", len(samples), cfg.synth.num_samples, n_lab, out)
    return 0


def cmd_train(args) -> int:
    extra = {}
    if args.labeled_fraction is not None:
        extra["train.labeled_subset_fraction"] = args.labeled_fraction
    if args.iterations is not None:
        extra["train.iterations"] = args.iterations
    for flag in args.ablate or []:
        extra["train.disable_texture_head" if flag == "no-texture" else "train.disable_self_losses"] = True
    if args.supervised_only:
        extra["train.supervised_only"] = True
    cfg = _config(args, extra)
    samples = read_dataset(args.data)
    train_set = [s for s in samples if s.split == "train"]
    val_set = [s for s in samples if s.split == "val"]
    if not val_set:
        raise DatasetError(f"{args.data}: no validation split")
    S = next(s.surfaces.shape[0] for s in samples if s.labeled)
    if S != cfg.model.surfaces:
        raise ValueError(f"dataset has {S} surfaces but the model config expects {cfg.model.surfaces}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg))
    man = RunManifest("train", out, cfg.as_dict(), cfg.train.seed)
    result = train(train_set, val_set, cfg.train, cfg.model, out_dir=out, resume=args.resume)
    man.add(out / "config.ini", out / "train_log.csv", out / "best.pt", out / "last.pt", out / "prior_constants.txt")
    man.data["best_step"] = result.best_step
    man.data["best_val_rmse"] = result.best_rmse
    man.write()
    log.info("best validation RMSE %.4f px at step %d", result.best_rmse, result.best_step)
    return 0


def write_report(path: Path, report) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["surface", "rmse_px", "std_px"])
        for k, (rmse, std) in enumerate(zip(report.surface_rmse, report.surface_std), 1):
            w.writerow([k, repr(rmse), repr(std)])
        w.writerow(["mean", repr(report.mean_rmse), repr(report.std_rmse)])


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    samples = _select(read_dataset(args.data), args.split)
    _check_surfaces(model, samples)
    out = Path(args.out)
    (out / "overlays").mkdir(parents=True, exist_ok=True)
    man = RunManifest("eval", out, {"checkpoint": str(args.checkpoint), "split": args.split}, None)
    report = evaluate(model, samples)
    y, _ = predict(model, np.stack([s.image for s in samples]))
    write_report(out / "report.csv", report)
    man.add(out / "report.csv")
    for s, pred in zip(samples, y.numpy()):
        p = out / "overlays" / f"{s.id}.png"
        overlay(s.image, pred, s.surfaces).save(p)
        man.add(p)
    man.data["mean_rmse"] = report.mean_rmse
    man.data["violations"] = report.violations
    man.write()
    log.info("mean RMSE %.4f +- %.4f px over %d B-scans", report.mean_rmse, report.std_rmse, len(samples))
    return 0


def cmd_segment(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    samples = _select(read_dataset(args.data), args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest("segment", out, {"checkpoint": str(args.checkpoint), "split": args.split}, None)
    y, _ = predict(model, np.stack([s.image for s in samples]))
    for s, pred in zip(samples, y.double().numpy()):
        p = out / f"{s.id}.csv"
        p.write_text("\n".join(",".join(repr(float(v)) for v in row) for row in pred) + "\n")
        man.add(p)
    man.write()
    return 0


@torch.no_grad()
def factor_images(model, image: np.ndarray) -> dict[str, np.ndarray]:
    """Binarized anatomical factors, texture and reconstruction as uint8 images."""
    model.eval()
    out = model(torch.from_numpy(image).float()[None])
    images = {}
    for k, layer in enumerate(out.factors.layer_maps[0], 1):
        images[f"factor_{k:02d}"] = (layer.numpy() * 255).astype(np.uint8)
    if out.factors.texture is not None:
        images["texture"] = (out.factors.texture[0].numpy() * 255).astype(np.uint8)
    images["reconstruction"] = _to_uint8(out.recon[0].numpy())
    return images


def cmd_inspect_factors(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    samples = read_dataset(args.data)
    matches = [s for s in samples if s.id == args.sample] if args.sample else samples[:1]
    if not matches:
        raise DatasetError(f"sample {args.sample!r} not found in {args.data}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest("inspect-factors", out, {"checkpoint": str(args.checkpoint), "sample": matches[0].id}, None)
    for name, img in factor_images(model, matches[0].image).items():
        p = out / f"{name}.png"
        Image.fromarray(img).save(p)
        man.add(p)
    man.write()
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI file with [synth], [model], [train], [weights]")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, required=True)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sdlayernet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset").set_defaults(fn=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="train on a dataset directory")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--labeled-fraction", type=float)
    t.add_argument("--iterations", type=int)
    t.add_argument("--ablate", action="append", choices=["no-texture", "no-self-losses"])
    t.add_argument("--supervised-only", action="store_true", help="labeled samples and supervised terms only")
    t.set_defaults(fn=cmd_train)

    for name, fn, split in (("eval", cmd_eval, "test"), ("segment", cmd_segment, "all")):
        e = sub.add_parser(name, parents=[common])
        e.add_argument("--checkpoint", type=Path, required=True)
        e.add_argument("--data", type=Path, required=True)
        e.add_argument("--split", default=split, choices=["train", "val", "test", "all"])
        e.set_defaults(fn=fn)

    f = sub.add_parser("inspect-factors", parents=[common], help="dump factor images for one sample")
    f.add_argument("--checkpoint", type=Path, required=True)
    f.add_argument("--data", type=Path, required=True)
    f.add_argument("--sample", help="sample id (default: first sample)")
    f.set_defaults(fn=cmd_inspect_factors)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (ConfigError, DatasetError, ValueError, FileNotFoundError, FloatingPointError) as exc:
        print(f"sdlayernet {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
