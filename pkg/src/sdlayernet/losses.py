"""Supervised, anatomical-prior, VAE and reconstruction losses.

Shapes follow :mod:`sdlayernet.topo`: PMFs are ``(..., S, H, W)`` and
surface positions ``(..., S, W)``. Per-sample values are averaged over any
leading batch dimensions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .topo import expected_positions

log = logging.getLogger(__name__)

EPS = 1e-8


@dataclass
class LossWeights:
    lambda1: float = 50.0  # KL to the Gaussian target
    lambda2: float = 50.0  # surface MSE
    lambda3: float = 1.0  # ordering prior
    lambda4: float = 1.0  # continuity prior
    lambda5: float = 1.0  # slope prior
    lambda6: float = 0.1  # PMF spread prior
    lambda7: float = 0.1  # style KL
    lambda8: float = 1.0  # masked reconstruction

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be finite and >= 0, got {v}")


@dataclass
class PriorConstants:
    """Per-surface jump/slope limits and the scalar prior hyperparameters.

    ``c`` and ``o`` are in pixels and pixels per column. They may be zero
    when derived from perfectly flat annotations.
    """

    c: Sequence[float]
    o: Sequence[float]
    delta: int = 10
    t: float = 1.0
    sigma: float = 0.5

    def __post_init__(self):
        self.c = [float(v) for v in self.c]
        self.o = [float(v) for v in self.o]
        if len(self.c) != len(self.o):
            raise ValueError("c and o must have one entry per surface")
        if any(v < 0 or not math.isfinite(v) for v in self.c + self.o):
            raise ValueError("c and o must be finite and non-negative")
        if int(self.delta) != self.delta or self.delta < 1:
            raise ValueError(f"delta must be a positive integer, got {self.delta}")
        self.delta = int(self.delta)
        if self.t <= 0 or self.sigma <= 0:
            raise ValueError("t and sigma must be strictly positive")

    @property
    def num_surfaces(self) -> int:
        return len(self.c)

    def save(self, path: str | Path) -> None:
        lines = [
            f"delta = {self.delta}",
            f"t = {self.t!r}",
            f"sigma = {self.sigma!r}",
            "c = " + " ".join(repr(v) for v in self.c),
            "o = " + " ".join(repr(v) for v in self.o),
        ]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "PriorConstants":
        values = {}
        for n, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{n}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            values[key] = val
        missing = {"delta", "t", "sigma", "c", "o"} - values.keys()
        if missing:
            raise ValueError(f"{path}: missing keys {sorted(missing)}")
        return cls(
            c=[float(v) for v in values["c"].split()],
            o=[float(v) for v in values["o"].split()],
            delta=int(values["delta"]),
            t=float(values["t"]),
            sigma=float(values["sigma"]),
        )


def derive_constants(
    annotations: Iterable[np.ndarray | torch.Tensor],
    delta: int = 10,
    t: float = 1.0,
    sigma: float = 0.5,
) -> PriorConstants:
    """Largest adjacent-column jump and largest delta-span slope per surface."""
    c = o = None
    for mu in annotations:
        mu = np.asarray(mu, dtype=np.float64)
        if mu.ndim != 2:
            raise ValueError(f"annotation must be S x W, got shape {mu.shape}")
        if mu.shape[1] <= delta:
            raise ValueError(f"width {mu.shape[1]} must exceed delta={delta}")
        jump = np.abs(np.diff(mu, axis=1)).max(axis=1)
        slope = (np.abs(mu[:, delta:] - mu[:, :-delta]) / delta).max(axis=1)
        c = jump if c is None else np.maximum(c, jump)
        o = slope if o is None else np.maximum(o, slope)
    if c is None:
        raise ValueError("cannot derive prior constants from an empty annotation set")
    return PriorConstants(c=c.tolist(), o=o.tolist(), delta=delta, t=t, sigma=sigma)


def _batch_mean(x: torch.Tensor, n_trailing: int) -> torch.Tensor:
    """Sum the trailing dims, then mean over whatever batch dims remain."""
    x = x.sum(dim=tuple(range(-n_trailing, 0)))
    return x.mean() if x.dim() else x


def gaussian_target(mu: torch.Tensor, H: int, sigma: float) -> torch.Tensor:
    """Discretized, per-column renormalized Gaussian PMF, floored at EPS.

    ``mu`` has shape (..., S, W); the result has shape (..., S, H, W).
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    r = torch.arange(H, dtype=mu.dtype, device=mu.device).view(H, 1)
    logits = -((r - mu.unsqueeze(-2)) ** 2) / (2.0 * sigma**2)
    return torch.softmax(logits, dim=-2).clamp_min(EPS)


def kl_supervised(P: torch.Tensor, mu: torch.Tensor, sigma: float) -> torch.Tensor:
    """Mean per-column KL(P || T) against the Gaussian target centred on ``mu``."""
    S, H, W = P.shape[-3:]
    T = gaussian_target(mu, H, sigma).detach()
    kl = P * (torch.log(P.clamp_min(EPS)) - torch.log(T))
    return _batch_mean(kl, 3) / (S * W)


def mse_supervised(y: torch.Tensor, mu: torch.Tensor) -> torch.Tensor:
    if y.shape != mu.shape:
        raise ValueError(f"shape mismatch: predicted {tuple(y.shape)} vs reference {tuple(mu.shape)}")
    return ((y - mu) ** 2).mean()


def loss_topo(y: torch.Tensor) -> torch.Tensor:
    """Sum of ordering violations, per column."""
    W = y.shape[-1]
    viol = F.relu(y[..., :-1, :] - y[..., 1:, :])
    return _batch_mean(viol, 2) / W


def _per_surface(values: Sequence[float], like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(values, dtype=like.dtype, device=like.device).view(-1, 1)


def loss_continuity(y: torch.Tensor, consts: PriorConstants) -> torch.Tensor:
    W = y.shape[-1]
    if W < 2:
        raise ValueError("continuity prior needs at least two columns")
    jump = (y[..., 1:] - y[..., :-1]).abs()
    return _batch_mean(F.relu(jump - _per_surface(consts.c, y)), 2) / W


def loss_slope(y: torch.Tensor, consts: PriorConstants) -> torch.Tensor:
    W, d = y.shape[-1], consts.delta
    if W <= d:
        raise ValueError(f"slope prior needs width > delta ({W} <= {d})")
    slope = (y[..., d:] - y[..., :-d]).abs() / d
    return _batch_mean(F.relu(slope - _per_surface(consts.o, y)), 2) / W


def pmf_std(P: torch.Tensor) -> torch.Tensor:
    """Standard deviation of each column PMF about its own mean, (..., S, W)."""
    r = torch.arange(P.shape[-2], dtype=P.dtype, device=P.device).view(-1, 1)
    mean = expected_positions(P).unsqueeze(-2)
    var = (P * (r - mean) ** 2).sum(dim=-2)
    # the offset keeps the sqrt differentiable at one-hot columns
    return torch.sqrt(var.clamp_min(0.0) + 1e-12)


def loss_std(P: torch.Tensor, consts: PriorConstants) -> torch.Tensor:
    """Mean over surfaces and columns of relu(std - t)."""
    S, _, W = P.shape[-3:]
    return _batch_mean(F.relu(pmf_std(P) - consts.t), 2) / (S * W)


def loss_vae_kl(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL of N(mean, exp(logvar)) from the unit Gaussian, summed over latent dims."""
    kl = 0.5 * (mean**2 + torch.exp(logvar) - 1.0 - logvar)
    return _batch_mean(kl, 1)


def retina_mask(y: torch.Tensor, H: int) -> torch.Tensor:
    """Boolean (..., H, W) mask of rows between the rounded top and bottom surfaces."""
    with torch.no_grad():
        top = torch.floor(y[..., 0, :] + 0.5).unsqueeze(-2)
        bottom = torch.floor(y[..., -1, :] + 0.5).unsqueeze(-2)
        r = torch.arange(H, dtype=y.dtype, device=y.device).view(H, 1)
        return (r >= top) & (r <= bottom)


def loss_reconstruction_masked(x: torch.Tensor, xhat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean absolute error restricted to the predicted retina (top to bottom surface)."""
    mask = retina_mask(y, x.shape[-2]).to(x.dtype)
    n = mask.sum()
    if n == 0:
        return (xhat * 0.0).sum()
    return ((x - xhat).abs() * mask).sum() / n


@dataclass
class LossBreakdown:
    kl: torch.Tensor
    mse: torch.Tensor
    to: torch.Tensor
    lc: torch.Tensor
    ls: torch.Tensor
    std: torch.Tensor
    z_kl: torch.Tensor
    rec: torch.Tensor
    total: torch.Tensor = field(default=None)

    TERMS = ("kl", "mse", "to", "lc", "ls", "std", "z_kl", "rec")

    def as_floats(self) -> dict[str, float]:
        return {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in (*self.TERMS, "total")}


def total_loss(
    kl=0.0, mse=0.0, to=0.0, lc=0.0, ls=0.0, std=0.0, z_kl=0.0, rec=0.0,
    weights: LossWeights | None = None,
) -> LossBreakdown:
    """Weighted composition: style KL + reconstruction + half of (supervised + prior) terms."""
    w = weights or LossWeights()
    if all(v == 0 for v in asdict(w).values()):
        log.warning("all loss weights are zero")
        raise ValueError("all loss weights are zero; nothing to optimize")
    parts = [torch.as_tensor(v, dtype=torch.float64) if not torch.is_tensor(v) else v
             for v in (kl, mse, to, lc, ls, std, z_kl, rec)]
    kl, mse, to, lc, ls, std, z_kl, rec = parts
    sup = w.lambda1 * kl + w.lambda2 * mse
    self_sup = w.lambda3 * to + w.lambda4 * lc + w.lambda5 * ls + w.lambda6 * std
    total = w.lambda7 * z_kl + w.lambda8 * rec + 0.5 * (sup + self_sup)
    return LossBreakdown(kl, mse, to, lc, ls, std, z_kl, rec, total)
