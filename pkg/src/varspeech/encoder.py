"""Per-frame Gaussian posterior over continuous latents, and the utterance encoder."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .distributions import DiagGaussian, reparameterized_sample


class FrameNorm(nn.Module):
    """Channel normalization applied independently at every frame of ``[B, C, T]``."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x):
        return self.norm(x.transpose(1, 2)).transpose(1, 2)


class ResBlock(nn.Module):
    """norm -> GELU -> conv(k) [+ step] -> norm -> GELU -> conv(1), with residual."""

    def __init__(self, width: int, kernel: int = 7, step_dim: int | None = None):
        super().__init__()
        self.norm1 = FrameNorm(width)
        self.conv1 = nn.Conv1d(width, width, kernel, padding=kernel // 2)
        self.norm2 = FrameNorm(width)
        self.conv2 = nn.Conv1d(width, width, 1)
        self.step_proj = nn.Linear(step_dim, width) if step_dim else None

    def forward(self, x, step_emb=None):
        h = self.conv1(F.gelu(self.norm1(x)))
        if self.step_proj is not None:
            h = h + self.step_proj(step_emb)[:, :, None]
        h = self.conv2(F.gelu(self.norm2(h)))
        return x + h


class PosteriorEncoder(nn.Module):
    def __init__(self, d_x: int, d_z: int, width: int = 64, n_blocks: int = 3, kernel: int = 7):
        super().__init__()
        self.d_x, self.d_z, self.kernel, self.n_blocks = d_x, d_z, kernel, n_blocks
        self.inp = nn.Conv1d(d_x, width, kernel, padding=kernel // 2)
        self.blocks = nn.ModuleList(ResBlock(width, kernel) for _ in range(n_blocks))
        self.norm = FrameNorm(width)
        self.mean_head = nn.Linear(width, d_z)
        self.log_std_head = nn.Linear(width, d_z)

    @property
    def receptive_radius(self) -> int:
        return (self.kernel // 2) * (1 + self.n_blocks)

    def forward(self, x: torch.Tensor) -> DiagGaussian:
        """``x``: standardized features ``[B, T, d_x]`` -> per-frame Gaussian ``[B, T, d_z]``."""
        if x.shape[1] == 0:
            raise ValueError("cannot encode an empty sequence")
        if x.shape[-1] != self.d_x:
            raise ValueError(f"expected {self.d_x} channels, got {x.shape[-1]}")
        h = self.inp(x.transpose(1, 2))
        for block in self.blocks:
            h = block(h)
        h = self.norm(h).transpose(1, 2)
        return DiagGaussian(self.mean_head(h), self.log_std_head(h))


def posterior_encode(enc: PosteriorEncoder, x: torch.Tensor) -> DiagGaussian:
    return enc(x)


def sample_posterior(g: DiagGaussian, generator: torch.Generator | None = None) -> torch.Tensor:
    noise = torch.randn(g.mean.shape, generator=generator, dtype=g.mean.dtype)
    return reparameterized_sample(g, noise)


def posterior_mode(g: DiagGaussian) -> torch.Tensor:
    return g.mean


class UtteranceEncoder(nn.Module):
    """Strided conv stack with instance norm, averaged over time."""

    MIN_FRAMES = 16

    def __init__(self, d_x: int, widths=(32, 64, 64)):
        super().__init__()
        layers = []
        prev = d_x
        for w in widths:
            layers += [nn.Conv1d(prev, w, 4, stride=2, padding=1),
                       nn.InstanceNorm1d(w, affine=True), nn.ReLU()]
            prev = w
        self.net = nn.Sequential(*layers)
        self.d_u = prev

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``x``: ``[B, T, d_x]`` -> ``[B, d_u]``."""
        h = x.transpose(1, 2)
        if h.shape[-1] < self.MIN_FRAMES:
            h = F.pad(h, (0, self.MIN_FRAMES - h.shape[-1]), mode="replicate")
        return self.net(h).mean(-1)


def crop_bounds(n_frames: int, crop_seconds: tuple[float, float], frame_rate: float,
                rng: np.random.Generator) -> tuple[int, int]:
    """Random crop of uniform duration in ``crop_seconds``; whole utterance if too short."""
    lo = int(round(crop_seconds[0] * frame_rate))
    hi = int(round(crop_seconds[1] * frame_rate))
    if n_frames <= lo:
        return 0, n_frames
    length = int(rng.integers(lo, min(hi, n_frames) + 1))
    start = int(rng.integers(0, n_frames - length + 1))
    return start, start + length


def utterance_encode(enc: UtteranceEncoder, x: torch.Tensor, crop_seconds=(2.0, 4.0),
                     frame_rate: float = 50.0, seed: int | None = None) -> torch.Tensor:
    """Embed a single utterance ``[T, d_x]``; ``seed=None`` uses the whole input."""
    if seed is not None:
        start, stop = crop_bounds(x.shape[0], crop_seconds, frame_rate, np.random.default_rng(seed))
        x = x[start:stop]
    return enc(x[None])[0]
