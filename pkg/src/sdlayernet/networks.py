"""Anatomy encoder, style VAE encoder and FiLM decoder, plus the full model."""

from __future__ import annotations

import io
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import topo

CHECKPOINT_FORMAT = 1


@dataclass
class ModelConfig:
    surfaces: int = 4
    height: int = 64
    width: int = 128
    stages: int = 3
    base_channels: int = 16
    attention: bool = True
    style_dim: int = 8
    style_uses_factors: bool = True
    texture_head: bool = True
    decoder_channels: int = 16

    def __post_init__(self):
        if self.surfaces < 1:
            raise ValueError("need at least one surface")
        k = 2**self.stages
        if self.height % k or self.width % k:
            raise ValueError(
                f"image size {self.height}x{self.width} must be divisible by 2**stages = {k}"
            )

    @property
    def factor_channels(self) -> int:
        return self.surfaces + int(self.texture_head)


class ResBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = nn.GroupNorm(1, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(1, cout)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()
        self.act1 = nn.PReLU(cout)
        self.act2 = nn.PReLU(cout)

    def forward(self, x):
        h = self.act1(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return self.act2(h + self.skip(x))


class AttentionGate(nn.Module):
    """Additive attention gate weighting skip features by the coarser decoder signal."""

    def __init__(self, skip_ch, gate_ch, inter_ch):
        super().__init__()
        self.theta = nn.Conv2d(skip_ch, inter_ch, 1)
        self.phi = nn.Conv2d(gate_ch, inter_ch, 1)
        self.psi = nn.Conv2d(inter_ch, 1, 1)

    def forward(self, skip, gate):
        a = F.relu(self.theta(skip) + self.phi(gate))
        return skip * torch.sigmoid(self.psi(a))


class AnatomyEncoder(nn.Module):
    """Residual (attention) U-Net with a surface-logit head and a texture head.

    Input ``(B, 1, H, W)``; returns logits ``(B, S, H, W)`` and texture
    ``(B, H, W)`` in (0, 1), or ``None`` when the texture head is disabled.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        chans = [cfg.base_channels * 2**k for k in range(cfg.stages + 1)]
        self.down = nn.ModuleList()
        cin = 1
        for c in chans[:-1]:
            self.down.append(ResBlock(cin, c))
            cin = c
        self.bottleneck = ResBlock(chans[-2], chans[-1])
        self.up = nn.ModuleList()
        self.gates = nn.ModuleList()
        self.dec = nn.ModuleList()
        for k in reversed(range(cfg.stages)):
            self.up.append(nn.ConvTranspose2d(chans[k + 1], chans[k], 2, stride=2))
            self.gates.append(
                AttentionGate(chans[k], chans[k], max(chans[k] // 2, 1)) if cfg.attention else nn.Identity()
            )
            self.dec.append(ResBlock(2 * chans[k], chans[k]))
        self.conv_s = nn.Conv2d(chans[0], cfg.surfaces, 1)
        self.conv_t = nn.Conv2d(chans[0], 1, 1) if cfg.texture_head else None

    def forward(self, x):
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for up, gate, dec in zip(self.up, self.gates, self.dec):
            x = up(x)
            skip = skips.pop()
            if self.cfg.attention:
                skip = gate(skip, x)
            x = dec(torch.cat([skip, x], dim=1))
        logits = self.conv_s(x)
        texture = torch.sigmoid(self.conv_t(x)).squeeze(1) if self.conv_t is not None else None
        return logits, texture


@dataclass
class StyleCode:
    mean: torch.Tensor
    logvar: torch.Tensor
    sample: torch.Tensor


class StyleEncoder(nn.Module):
    """Strided conv encoder to a diagonal Gaussian over the style latent."""

    def __init__(self, cfg: ModelConfig, width: int = 16):
        super().__init__()
        cin = 1 + (cfg.factor_channels if cfg.style_uses_factors else 0)
        self.uses_factors = cfg.style_uses_factors
        self.features = nn.Sequential(
            nn.Conv2d(cin, width, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        self.mean = nn.Linear(2 * width, cfg.style_dim)
        self.logvar = nn.Linear(2 * width, cfg.style_dim)

    def forward(self, image, factors: torch.Tensor | None = None, generator=None) -> StyleCode:
        x = image
        if self.uses_factors:
            if factors is None or factors.shape[-2:] != image.shape[-2:]:
                raise ValueError("style encoder needs factors with the image's spatial size")
            x = torch.cat([image, factors], dim=1)
        h = self.features(x)
        mean, logvar = self.mean(h), self.logvar(h)
        if self.training:
            noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype, device=mean.device)
            sample = mean + torch.exp(0.5 * logvar) * noise
        else:
            sample = mean
        return StyleCode(mean, logvar, sample)


class FiLMDecoder(nn.Module):
    """Four conv blocks, each modulated channel-wise by the style code.

    Modulation is ``(1 + gamma) * h + beta``; the projection producing
    gamma/beta is zero-initialised, so an untrained decoder ignores style.
    """

    n_blocks = 4

    def __init__(self, in_channels: int, style_dim: int, channels: int = 16):
        super().__init__()
        self.channels = channels
        self.convs = nn.ModuleList(
            [nn.Conv2d(in_channels if k == 0 else channels, channels, 3, padding=1) for k in range(self.n_blocks)]
        )
        self.film = nn.Sequential(nn.Linear(style_dim, 32), nn.LeakyReLU(0.2))
        self.film_out = nn.Linear(32, 2 * channels * self.n_blocks)
        nn.init.zeros_(self.film_out.weight)
        nn.init.zeros_(self.film_out.bias)
        self.out = nn.Conv2d(channels, 1, 1)

    def film_params(self, z):
        """Per-block (gamma, beta), each of shape (B, channels): spatially constant."""
        p = self.film_out(self.film(z)).view(z.shape[0], self.n_blocks, 2, self.channels)
        return [(p[:, k, 0], p[:, k, 1]) for k in range(self.n_blocks)]

    def forward(self, factors, z):
        h = factors
        for conv, (gamma, beta) in zip(self.convs, self.film_params(z)):
            h = conv(h)
            h = (1 + gamma[:, :, None, None]) * h + beta[:, :, None, None]
            h = F.leaky_relu(h, 0.2)
        return self.out(h).squeeze(1)


@dataclass
class ForwardOutput:
    logits: torch.Tensor
    P: torch.Tensor
    y_raw: torch.Tensor
    y: torch.Tensor
    soft_factors: topo.AnatomyFactors
    factors: topo.AnatomyFactors
    style: StyleCode
    recon: torch.Tensor


class SDLayerNet(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.anatomy = AnatomyEncoder(self.cfg)
        self.style = StyleEncoder(self.cfg)
        self.decoder = FiLMDecoder(self.cfg.factor_channels, self.cfg.style_dim, self.cfg.decoder_channels)

    def segment(self, image):
        """Image (B, H, W) -> (PMFs, raw positions, rectified positions, logits, texture)."""
        logits, texture = self.anatomy(image.unsqueeze(1))
        P = topo.columnwise_softmax(logits)
        y_raw = topo.expected_positions(P)
        return P, y_raw, topo.rectify_surfaces(y_raw), logits, texture

    def forward(self, image, generator=None) -> ForwardOutput:
        P, y_raw, y, logits, texture = self.segment(image)
        soft = topo.AnatomyFactors(topo.surfaces_to_layers(P), texture)
        hard = topo.binarize_factors(soft)
        stack = hard.stack()
        style = self.style(image.unsqueeze(1), stack, generator=generator)
        recon = self.decoder(stack, style.sample)
        return ForwardOutput(logits, P, y_raw, y, soft, hard, style, recon)


def save_checkpoint(path, model: SDLayerNet, optimizer=None, seed=None, extra=None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_config": asdict(model.cfg),
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "seed": seed,
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path, map_location="cpu"):
    """Return (model, payload). The payload keeps optimizer state and extras."""
    payload = torch.load(path, map_location=map_location, weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {payload.get('format')!r}")
    model = SDLayerNet(ModelConfig(**payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    return model, payload
