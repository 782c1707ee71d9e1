"""Diagonal Gaussian primitives shared by the posterior, the prior and the KL terms."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

LOG_STD_MIN = -7.0
LOG_STD_MAX = 5.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class DiagGaussian:
    """Gaussian with independent coordinates over the last axis.

    Leading axes are batch/time, so the same type doubles as a per-frame
    sequence of Gaussians.
    """

    mean: torch.Tensor
    log_std: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_std.shape:
            raise ValueError(f"mean {tuple(self.mean.shape)} and log_std {tuple(self.log_std.shape)} differ")
        self.log_std = self.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)

    @property
    def std(self) -> torch.Tensor:
        return self.log_std.exp()

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def __getitem__(self, idx) -> "DiagGaussian":
        return DiagGaussian(self.mean[idx], self.log_std[idx])


GaussianSequence = DiagGaussian


def _check(g: DiagGaussian, x: torch.Tensor) -> None:
    if x.shape[-1] != g.dim:
        raise ValueError(f"dimension mismatch: {x.shape[-1]} vs {g.dim}")


def log_prob(g: DiagGaussian, x: torch.Tensor) -> torch.Tensor:
    """Log-density summed over the last axis."""
    _check(g, x)
    z = (x - g.mean) * torch.exp(-g.log_std)
    return (-g.log_std - HALF_LOG_2PI - 0.5 * z * z).sum(-1)


def kl_divergence(q: DiagGaussian, p: DiagGaussian) -> torch.Tensor:
    """Closed-form KL(q || p), summed over the last axis."""
    if q.dim != p.dim:
        raise ValueError(f"dimension mismatch: {q.dim} vs {p.dim}")
    var_ratio = torch.exp(2.0 * (q.log_std - p.log_std))
    mahal = ((q.mean - p.mean) * torch.exp(-p.log_std)) ** 2
    return 0.5 * (var_ratio + mahal - 1.0).sum(-1) - (q.log_std - p.log_std).sum(-1)


def reparameterized_sample(g: DiagGaussian, noise: torch.Tensor) -> torch.Tensor:
    _check(g, noise)
    return g.mean + g.std * noise


def sample(g: DiagGaussian, generator: torch.Generator | None = None) -> torch.Tensor:
    noise = torch.randn(g.mean.shape, generator=generator, dtype=g.mean.dtype, device=g.mean.device)
    return reparameterized_sample(g, noise)


def scale_temperature(g: DiagGaussian, tau: float) -> DiagGaussian:
    """Multiply the standard deviation by ``tau``."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return DiagGaussian(g.mean, g.log_std + math.log(tau))
