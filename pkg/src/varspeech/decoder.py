"""Conditional diffusion decoder: cosine-schedule DDPM training, DDIM sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .distributions import DiagGaussian, log_prob
from .encoder import FrameNorm, ResBlock


@dataclass
class DiffusionSchedule:
    n_steps: int
    alpha_bar: torch.Tensor  # [n_steps + 1], float64, alpha_bar[0] == 1
    betas: torch.Tensor      # [n_steps + 1], betas[0] unused (0)


def make_cosine_schedule(n_steps: int = 1000, offset: float = 0.008, max_beta: float = 0.999) -> DiffusionSchedule:
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    s = np.arange(n_steps + 1, dtype=np.float64)
    f = np.cos((s / n_steps + offset) / (1.0 + offset) * math.pi / 2.0) ** 2
    ab = f / f[0]
    betas = np.zeros(n_steps + 1)
    betas[1:] = np.minimum(1.0 - ab[1:] / ab[:-1], max_beta)
    alpha_bar = np.cumprod(1.0 - betas)
    return DiffusionSchedule(n_steps, torch.from_numpy(alpha_bar), torch.from_numpy(betas))


def sinusoidal_embedding(steps: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1))
    args = steps.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class DenoiserNet(nn.Module):
    """U-shaped stack of residual conv blocks predicting the added noise.

    Conditioning is projected per block and added to that block's input; the
    diffusion step embedding is added inside each block. A 1x1 path from the
    noisy input to the output keeps the per-frame amplitude that the frame
    norms discard, which the noise estimate needs at high noise levels.
    """

    def __init__(self, d_x: int, cond_dim: int, width: int = 64, n_blocks: int = 6, kernel: int = 7):
        super().__init__()
        if n_blocks % 2:
            raise ValueError("n_blocks must be even for the U-shaped skips")
        self.d_x, self.width = d_x, width
        self.inp = nn.Conv1d(d_x, width, kernel, padding=kernel // 2)
        self.step_mlp = nn.Sequential(nn.Linear(width, width), nn.GELU(), nn.Linear(width, width))
        self.cond_proj = nn.ModuleList(nn.Linear(cond_dim, width) for _ in range(n_blocks))
        self.blocks = nn.ModuleList(ResBlock(width, kernel, step_dim=width) for _ in range(n_blocks))
        self.merge = nn.ModuleList(nn.Conv1d(2 * width, width, 1) for _ in range(n_blocks // 2))
        self.out_norm = FrameNorm(width)
        self.out = nn.Conv1d(width, d_x, 1)
        self.skip = nn.Conv1d(d_x, d_x, 1)

    def forward(self, x_noisy, steps, cond):
        """``x_noisy`` ``[B, T, d_x]``, ``steps`` ``[B]``, ``cond`` ``[B, T, C]``."""
        x_in = x_noisy.transpose(1, 2)
        h = self.inp(x_in)
        s = self.step_mlp(sinusoidal_embedding(steps, self.width).to(h.dtype))
        half = len(self.blocks) // 2
        skips = []
        for i, block in enumerate(self.blocks):
            if i >= half:
                h = self.merge[i - half](torch.cat([h, skips.pop()], dim=1))
            h = block(h + self.cond_proj[i](cond).transpose(1, 2), s)
            if i < half:
                skips.append(h)
        return (self.out(F.gelu(self.out_norm(h))) + self.skip(x_in)).transpose(1, 2)


class DiffusionDecoder(nn.Module):
    def __init__(self, d_x: int, k: int, d_z: int, d_u: int, variant: str = "full", width: int = 64,
                 n_blocks: int = 6, kernel: int = 7, token_emb_dim: int = 32, n_steps: int = 1000):
        super().__init__()
        self.uses_tokens = variant != "token_free"
        self.uses_latents = variant != "token_only"
        self.d_x = d_x
        cond_dim = d_u
        if self.uses_tokens:
            self.token_emb = nn.Embedding(k, token_emb_dim)
            cond_dim += token_emb_dim
        if self.uses_latents:
            cond_dim += d_z
        self.net = DenoiserNet(d_x, cond_dim, width, n_blocks, kernel)
        self.schedule = make_cosine_schedule(n_steps)

    def conditioning(self, tokens, latents, utt):
        """Per-frame ``[latent | token embedding | utterance embedding]``."""
        ref = latents if latents is not None else tokens
        T = ref.shape[1]
        parts = []
        if self.uses_latents:
            parts.append(latents)
        if self.uses_tokens:
            parts.append(self.token_emb(tokens))
        parts.append(utt[:, None, :].expand(-1, T, -1))
        return torch.cat(parts, dim=-1)


def q_sample(sched: DiffusionSchedule, x0, steps, noise):
    ab = sched.alpha_bar.to(x0.dtype)[steps][:, None, None]
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise


def ddpm_loss(net: DenoiserNet, x0, cond, sched: DiffusionSchedule, steps, noise, reduction: str = "mean"):
    """L1 noise-prediction loss at diffusion steps ``steps`` (``1..n_steps``)."""
    steps = torch.as_tensor(steps).reshape(-1).expand(x0.shape[0])
    if steps.min() < 1 or steps.max() > sched.n_steps:
        raise ValueError(f"diffusion step out of range [1, {sched.n_steps}]")
    x_noisy = q_sample(sched, x0, steps, noise)
    err = (net(x_noisy, steps, cond) - noise).abs()
    if reduction == "none":
        return err.mean(dim=(1, 2))
    return err.mean()


def _randn(shape, generator, dtype) -> torch.Tensor:
    """Standard normal noise; a list of generators draws each batch row from its own stream."""
    if isinstance(generator, (list, tuple)):
        if len(generator) != shape[0]:
            raise ValueError("need one generator per batch row")
        return torch.stack([torch.randn(shape[1:], generator=g, dtype=dtype) for g in generator])
    return torch.randn(shape, generator=generator, dtype=dtype)


def ddim_timesteps(n_steps: int, n_infer: int) -> list[int]:
    return [int(round(v)) for v in np.linspace(n_steps, 0, n_infer + 1)]


@torch.no_grad()
def ddim_sample(net: DenoiserNet, cond, sched: DiffusionSchedule, n_infer_steps: int = 100, eta: float = 0.5,
                generator: torch.Generator | list[torch.Generator] | None = None, x_T: torch.Tensor | None = None,
                clip_x0: float | None = 6.0) -> torch.Tensor:
    """DDIM over an evenly strided step subsequence; returns standardized ``x_0``.

    ``generator`` may be a list with one generator per batch row, which makes
    each row's sample independent of what it is batched with.
    """
    if not 1 <= n_infer_steps <= sched.n_steps:
        raise ValueError(f"n_infer_steps must lie in [1, {sched.n_steps}]")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    B, T = cond.shape[:2]
    dtype = cond.dtype
    x = x_T if x_T is not None else _randn((B, T, net.d_x), generator, dtype)
    ab = sched.alpha_bar
    ts = ddim_timesteps(sched.n_steps, n_infer_steps)
    for t, s in zip(ts[:-1], ts[1:]):
        ab_t, ab_s = float(ab[t]), float(ab[s])
        eps = net(x, torch.full((B,), t), cond)
        x0 = (x - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
        if clip_x0 is not None:
            x0 = x0.clamp(-clip_x0, clip_x0)
            eps = (x - math.sqrt(ab_t) * x0) / math.sqrt(1.0 - ab_t)
        sigma = eta * math.sqrt((1.0 - ab_s) / (1.0 - ab_t)) * math.sqrt(1.0 - ab_t / ab_s)
        x = math.sqrt(ab_s) * x0 + math.sqrt(max(1.0 - ab_s - sigma ** 2, 0.0)) * eps
        if sigma > 0:
            x = x + sigma * _randn(x.shape, generator, dtype)
    return x


class GaussianDecoder(nn.Module):
    """Per-frame Gaussian decoder with an exact likelihood.

    Used where ``log p(X | Z)`` must be evaluated, e.g. importance-weighted
    bounds; the diffusion decoder only offers a training surrogate.
    """

    def __init__(self, d_x: int, k: int, d_z: int, d_u: int, variant: str = "full", hidden: int = 32,
                 token_emb_dim: int = 8):
        super().__init__()
        self.uses_tokens = variant != "token_free"
        self.uses_latents = variant != "token_only"
        cond_dim = d_u + (token_emb_dim if self.uses_tokens else 0) + (d_z if self.uses_latents else 0)
        if self.uses_tokens:
            self.token_emb = nn.Embedding(k, token_emb_dim)
        self.mlp = nn.Sequential(nn.Linear(cond_dim, hidden), nn.GELU(), nn.Linear(hidden, d_x))
        self.log_std = nn.Parameter(torch.zeros(d_x))

    conditioning = DiffusionDecoder.conditioning

    def log_likelihood(self, x, tokens, latents, utt) -> torch.Tensor:
        mean = self.mlp(self.conditioning(tokens, latents, utt))
        return log_prob(DiagGaussian(mean, self.log_std.expand_as(mean)), x).sum(-1)
