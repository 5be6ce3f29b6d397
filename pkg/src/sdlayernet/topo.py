"""Differentiable topological engine.

Turns raw surface logits into ordered surface positions and mutually
exclusive layer maps. Every function operates on the trailing dimensions
and accepts arbitrary leading batch dimensions:

    probability / cumulative maps   (..., S, H, W)
    surface positions               (..., S, W)

Row index 0 is the top of the image.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

__all__ = [
    "AnatomyFactors",
    "columnwise_softmax",
    "expected_positions",
    "rectify_surfaces",
    "cumulative_maps",
    "enforce_map_ordering",
    "decompose_layers",
    "binarize",
    "binarize_factors",
    "surfaces_to_layers",
]


@dataclass
class AnatomyFactors:
    """Layer maps (..., S, H, W) plus a single texture channel (..., H, W)."""

    layer_maps: torch.Tensor
    texture: torch.Tensor | None = None

    def stack(self) -> torch.Tensor:
        """Channel stack fed to the style encoder and the decoder."""
        if self.texture is None:
            return self.layer_maps
        return torch.cat([self.layer_maps, self.texture.unsqueeze(-3)], dim=-3)


def columnwise_softmax(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over rows, independently for every (surface, column) pair."""
    if not torch.isfinite(logits).all():
        bad = (~torch.isfinite(logits)).sum().item()
        raise ValueError(f"surface logits contain {bad} non-finite entries")
    return torch.softmax(logits, dim=-2)


def _row_index(P: torch.Tensor) -> torch.Tensor:
    H = P.shape[-2]
    return torch.arange(H, dtype=P.dtype, device=P.device).view(H, 1)


def expected_positions(P: torch.Tensor) -> torch.Tensor:
    """Mean row position of each column PMF, shape (..., S, W)."""
    return (P * _row_index(P)).sum(dim=-2)


def rectify_surfaces(y: torch.Tensor) -> torch.Tensor:
    """Push each surface to lie at or below its predecessor.

    Sequential ramp update ``y[s] = y[s-1] + relu(y[s] - y[s-1])``, applied
    on the already rectified predecessor.
    """
    out = [y[..., 0, :]]
    for s in range(1, y.shape[-2]):
        prev = out[-1]
        out.append(prev + F.relu(y[..., s, :] - prev))
    return torch.stack(out, dim=-2)


def cumulative_maps(P: torch.Tensor) -> torch.Tensor:
    """Top-down cumulative sum per column: ~0 above the surface, ~1 below."""
    return torch.cumsum(P, dim=-2)


def enforce_map_ordering(C: torch.Tensor) -> torch.Tensor:
    """Make cumulative maps elementwise non-increasing over surfaces.

    ``M[0] = C[0]`` and ``M[s] = relu(C[s] + M[s-1] - 1)``. For C in [0, 1]
    this gives ``M[s] <= M[s-1]``, so the layer decomposition is non-negative.
    """
    out = [C[..., 0, :, :]]
    for s in range(1, C.shape[-3]):
        out.append(F.relu(C[..., s, :, :] + out[-1] - 1.0))
    return torch.stack(out, dim=-3)


def decompose_layers(Mcum: torch.Tensor, atol: float = 1e-5) -> torch.Tensor:
    """Split ordered cumulative maps into mutually exclusive layer maps.

    Layer ``s`` is ``Mcum[s] - Mcum[s+1]``; the last layer is ``Mcum[-1]``.
    """
    upper, lower = Mcum[..., :-1, :, :], Mcum[..., 1:, :, :]
    if upper.numel() and (lower - upper).max().item() > atol:
        worst = (lower - upper).max().item()
        raise ValueError(
            f"cumulative maps are not non-increasing over surfaces (max increase {worst:.3g}); "
            "run enforce_map_ordering first"
        )
    return torch.cat([upper - lower, Mcum[..., -1:, :, :]], dim=-3)


class _RoundSTE(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        # ties round up
        return torch.floor(x + 0.5)

    @staticmethod
    def backward(ctx, grad):
        return grad


def binarize(x: torch.Tensor) -> torch.Tensor:
    """Round to nearest integer with an identity (straight-through) gradient."""
    return _RoundSTE.apply(x)


def binarize_factors(factors: AnatomyFactors) -> AnatomyFactors:
    texture = None if factors.texture is None else binarize(factors.texture)
    return AnatomyFactors(binarize(factors.layer_maps), texture)


def surfaces_to_layers(P: torch.Tensor) -> torch.Tensor:
    """Full chain from PMFs to (soft) layer maps."""
    return decompose_layers(enforce_map_ordering(cumulative_maps(P)))
