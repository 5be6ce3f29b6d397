"""Semi-supervised training loop, evaluation and model selection."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import losses as L
from .losses import LossWeights, PriorConstants, derive_constants
from .madgrad import MADGRAD
from .networks import ModelConfig, SDLayerNet, load_checkpoint, save_checkpoint
from .synthdata import Sample

log = logging.getLogger(__name__)

LOG_FIELDS = ["step", *L.LossBreakdown.TERMS, "total", "grad_norm", "grad_norm_clipped", "n_labeled", "n_unlabeled"]


@dataclass
class TrainConfig:
    batch_labeled: int = 7
    batch_unlabeled: int = 7
    learning_rate: float = 1e-4
    optimizer: str = "madgrad"  # or "adam"
    momentum: float = 0.9
    grad_clip_norm: float = 0.5
    iterations: int = 300
    val_every: int = 25
    seed: int = 0
    flip_probability: float = 0.3
    labeled_subset_fraction: float = 1.0
    prior_delta: int = 10
    prior_t: float = 1.0
    target_sigma: float = 0.5
    disable_texture_head: bool = False
    disable_self_losses: bool = False
    supervised_only: bool = False
    priors_on_all: bool = False
    eval_batch: int = 32
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.batch_labeled < 1 or self.batch_unlabeled < 0:
            raise ValueError("need batch_labeled >= 1 and batch_unlabeled >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer not in ("madgrad", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def effective_weights(self) -> LossWeights:
        w = copy.copy(self.weights)
        if self.disable_self_losses or self.supervised_only:
            w.lambda3 = w.lambda4 = w.lambda5 = w.lambda6 = 0.0
        if self.supervised_only:
            w.lambda7 = w.lambda8 = 0.0
        return w


@dataclass
class EvalReport:
    surface_rmse: list[float]
    surface_std: list[float]
    mean_rmse: float
    std_rmse: float
    bscan_rmse: list[float]
    violations: int
    rec_mae: float


def make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "madgrad":
        return MADGRAD(params, lr=cfg.learning_rate, momentum=cfg.momentum)
    return torch.optim.Adam(params, lr=cfg.learning_rate)


def subset_labels(samples: Sequence[Sample], fraction: float, seed: int) -> list[Sample]:
    """Keep labels on a random fraction of the labeled samples, at least one per volume.

    De-labeled samples are returned without surfaces, i.e. they join the
    unlabeled pool.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    labeled = [k for k, s in enumerate(samples) if s.labeled]
    if fraction == 1.0 or not labeled:
        return list(samples)
    rng = random.Random(seed)
    volumes: dict[str, list[int]] = {}
    for k in labeled:
        volumes.setdefault(samples[k].volume, []).append(k)
    n_keep = round(fraction * len(labeled))
    if n_keep < len(volumes):
        raise ValueError(
            f"fraction {fraction} keeps {n_keep} labels but {len(volumes)} volumes must stay represented"
        )
    keep = {rng.choice(idx) for _, idx in sorted(volumes.items())}
    rest = sorted(set(labeled) - keep)
    keep |= set(rng.sample(rest, n_keep - len(keep)))
    return [
        s if (k in keep or not s.labeled) else Sample(s.image, None, s.id, s.volume, s.split)
        for k, s in enumerate(samples)
    ]


def _draw(n_pool: int, n: int, gen: torch.Generator) -> list[int]:
    if n_pool == 0 or n == 0:
        return []
    if n <= n_pool:
        return torch.randperm(n_pool, generator=gen)[:n].tolist()
    return torch.randint(n_pool, (n,), generator=gen).tolist()


def make_batch(labeled, unlabeled, cfg: TrainConfig, gen: torch.Generator):
    """Images (B, H, W) with labeled samples first, their surfaces, and the labeled count."""
    li = _draw(len(labeled), cfg.batch_labeled, gen)
    ui = [] if cfg.supervised_only else _draw(len(unlabeled), cfg.batch_unlabeled, gen)
    images = [labeled[k].image for k in li] + [unlabeled[k].image for k in ui]
    mu = [labeled[k].surfaces for k in li]
    flips = (torch.rand(len(images), generator=gen) < cfg.flip_probability).tolist()
    images = [np.ascontiguousarray(im[:, ::-1]) if f else im for im, f in zip(images, flips)]
    mu = [np.ascontiguousarray(m[:, ::-1]) if f else m for m, f in zip(mu, flips)]
    x = torch.from_numpy(np.stack(images)).float()
    mu = torch.from_numpy(np.stack(mu)).float() if mu else None
    return x, mu, len(li)


def compute_losses(out, mu, n_labeled, consts: PriorConstants, cfg: TrainConfig, x) -> L.LossBreakdown:
    """Route supervised terms to labeled rows and prior terms to unlabeled rows."""
    zero = out.y.new_zeros(())
    B = out.y.shape[0]
    kl = mse = zero
    if n_labeled:
        kl = L.kl_supervised(out.P[:n_labeled], mu, consts.sigma)
        mse = L.mse_supervised(out.y[:n_labeled], mu)
    first = 0 if cfg.priors_on_all else n_labeled
    to = lc = ls = std = zero
    if first < B:
        to = L.loss_topo(out.y_raw[first:])
        lc = L.loss_continuity(out.y[first:], consts)
        ls = L.loss_slope(out.y[first:], consts)
        std = L.loss_std(out.P[first:], consts)
    z_kl = L.loss_vae_kl(out.style.mean, out.style.logvar)
    rec = L.loss_reconstruction_masked(x, out.recon, out.y)
    return L.total_loss(kl, mse, to, lc, ls, std, z_kl, rec, weights=cfg.effective_weights())


def grad_norm(params) -> float:
    grads = [p.grad.detach().flatten() for p in params if p.grad is not None]
    if not grads:
        return 0.0
    return float(torch.linalg.vector_norm(torch.cat(grads)))


def train_step(batch, model: SDLayerNet, opt, cfg: TrainConfig, consts: PriorConstants, gen=None):
    """One forward/backward/update. Returns (breakdown, pre-clip norm, post-clip norm)."""
    x, mu, n_labeled = batch
    model.train()
    opt.zero_grad(set_to_none=True)
    out = model(x, generator=gen)
    parts = compute_losses(out, mu, n_labeled, consts, cfg, x)
    for name in (*L.LossBreakdown.TERMS, "total"):
        if not torch.isfinite(getattr(parts, name)):
            raise FloatingPointError(f"non-finite loss term {name!r} = {float(getattr(parts, name))}")
    parts.total.backward()
    params = [p for p in model.parameters() if p.grad is not None]
    pre = float(torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip_norm))
    post = grad_norm(params)
    opt.step()
    return parts, pre, post


@torch.no_grad()
def predict(model: SDLayerNet, images: np.ndarray | torch.Tensor, batch: int = 32):
    """Rectified surfaces (N, S, W) and reconstructions (N, H, W)."""
    model.eval()
    images = torch.as_tensor(np.asarray(images)).float()
    ys, recs = [], []
    for k in range(0, len(images), batch):
        out = model(images[k:k + batch])
        ys.append(out.y)
        recs.append(out.recon)
    return torch.cat(ys), torch.cat(recs)


def surface_errors(pred, ref) -> tuple[list[float], list[float]]:
    """Per-surface RMSE over all B-scans/columns and per-B-scan RMSE over all surfaces/columns."""
    d2 = (torch.as_tensor(pred, dtype=torch.float64) - torch.as_tensor(ref, dtype=torch.float64)) ** 2
    per_surface = torch.sqrt(d2.mean(dim=(0, 2))).tolist()
    per_bscan = torch.sqrt(d2.mean(dim=(1, 2))).tolist()
    return per_surface, per_bscan


def count_violations(y) -> int:
    y = torch.as_tensor(y)
    return int((y[..., 1:, :] < y[..., :-1, :]).sum())


def evaluate(model: SDLayerNet, samples: Sequence[Sample], batch: int = 32) -> EvalReport:
    if not samples or any(not s.labeled for s in samples):
        raise ValueError("evaluation needs a non-empty, fully labeled dataset")
    images = np.stack([s.image for s in samples])
    ref = torch.from_numpy(np.stack([s.surfaces for s in samples]))
    y, recon = predict(model, images, batch)
    per_surface, per_bscan = surface_errors(y, ref)
    per_pair = torch.sqrt(((y.double() - ref) ** 2).mean(dim=2))
    x = torch.from_numpy(images)
    mae = [float(L.loss_reconstruction_masked(x[k], recon[k], y[k])) for k in range(len(samples))]
    return EvalReport(
        surface_rmse=per_surface,
        surface_std=per_pair.std(dim=0, unbiased=False).tolist(),
        mean_rmse=float(np.mean(per_bscan)),
        std_rmse=float(np.std(per_bscan)),
        bscan_rmse=per_bscan,
        violations=count_violations(y),
        rec_mae=float(np.mean(mae)),
    )


def argmin_first(values: Sequence[float]) -> int:
    """Index of the smallest value; ties go to the earliest."""
    if not len(values):
        raise ValueError("no candidates to select from")
    best = 0
    for k, v in enumerate(values):
        if v < values[best]:
            best = k
    return best


def select_best(checkpoints: Sequence, val_samples: Sequence[Sample]) -> int:
    """Index of the checkpoint (path or model) with the lowest mean validation RMSE."""
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    scores = []
    for ck in checkpoints:
        model = ck if isinstance(ck, SDLayerNet) else load_checkpoint(ck)[0]
        scores.append(evaluate(model, val_samples).mean_rmse)
    return argmin_first(scores)


@dataclass
class TrainResult:
    model: SDLayerNet
    constants: PriorConstants
    best_step: int
    best_rmse: float
    val_history: list[tuple[int, float]]
    log_rows: list[dict]


def _log_line(row: dict) -> str:
    buf = io.StringIO()
    csv.DictWriter(buf, LOG_FIELDS, lineterminator="\n").writerow(
        {k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()}
    )
    return buf.getvalue()


def train(
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    cfg: TrainConfig | None = None,
    model_cfg: ModelConfig | None = None,
    out_dir: str | Path | None = None,
    resume: bool = False,
) -> TrainResult:
    """Train from scratch (or resume) and return the best model by validation RMSE.

    With ``out_dir`` set, writes ``train_log.csv`` (one row per step),
    ``last.pt`` (resumable state, refreshed at every validation) and
    ``best.pt``.
    """
    cfg = cfg or TrainConfig()
    model_cfg = copy.copy(model_cfg or ModelConfig())
    if cfg.disable_texture_head:
        model_cfg.texture_head = False
    torch.use_deterministic_algorithms(True)

    pool = subset_labels(train_samples, cfg.labeled_subset_fraction, cfg.seed)
    labeled = [s for s in pool if s.labeled]
    unlabeled = [s for s in pool if not s.labeled]
    if not labeled:
        raise ValueError("training needs at least one labeled sample")
    S = labeled[0].surfaces.shape[0]
    if S != model_cfg.surfaces:
        raise ValueError(f"data has {S} surfaces, model is configured for {model_cfg.surfaces}")
    consts = derive_constants(
        [s.surfaces for s in labeled], delta=cfg.prior_delta, t=cfg.prior_t, sigma=cfg.target_sigma
    )

    torch.manual_seed(cfg.seed)
    model = SDLayerNet(model_cfg)
    opt = make_optimizer(model.parameters(), cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    start, history, best_state = 0, [], None
    rows: list[dict] = []

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        consts.save(out / "prior_constants.txt")
    log_path = out / "train_log.csv" if out is not None else None

    if resume and out is not None and (out / "last.pt").exists():
        model, payload = load_checkpoint(out / "last.pt")
        opt = make_optimizer(model.parameters(), cfg)
        opt.load_state_dict(payload["optimizer"])
        extra = payload["extra"]
        gen.set_state(extra["generator"])
        start, history = extra["step"], [tuple(h) for h in extra["val_history"]]
        if (out / "best.pt").exists():
            best_state = load_checkpoint(out / "best.pt")[0].state_dict()
        kept = log_path.read_text().splitlines(keepends=True)[: start + 1]
        log_path.write_text("".join(kept))
        log.info("resumed at step %d", start)
    elif log_path is not None:
        log_path.write_text(",".join(LOG_FIELDS) + "\n")

    def validate(step):
        nonlocal best_state
        rmse = evaluate(model, val_samples, cfg.eval_batch).mean_rmse
        history.append((step, rmse))
        if argmin_first([h[1] for h in history]) == len(history) - 1:
            best_state = copy.deepcopy(model.state_dict())
            if out is not None:
                save_checkpoint(out / "best.pt", model, seed=cfg.seed, extra={"step": step, "val_rmse": rmse})
        if out is not None:
            save_checkpoint(
                out / "last.pt", model, opt, seed=cfg.seed,
                extra={"step": step, "val_history": history, "generator": gen.get_state()},
            )
        log.info("step %d  val RMSE %.4f px", step, rmse)

    for step in range(start + 1, cfg.iterations + 1):
        batch = make_batch(labeled, unlabeled, cfg, gen)
        parts, pre, post = train_step(batch, model, opt, cfg, consts, gen)
        row = {"step": step, **parts.as_floats(), "grad_norm": pre, "grad_norm_clipped": post,
               "n_labeled": batch[2], "n_unlabeled": batch[0].shape[0] - batch[2]}
        rows.append(row)
        if log_path is not None:
            with log_path.open("a") as fh:
                fh.write(_log_line(row))
        if step % cfg.val_every == 0 or step == cfg.iterations:
            validate(step)

    best = argmin_first([h[1] for h in history]) if history else None
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(
        model=model,
        constants=consts,
        best_step=history[best][0] if history else start,
        best_rmse=history[best][1] if history else math.nan,
        val_history=history,
        log_rows=rows,
    )
