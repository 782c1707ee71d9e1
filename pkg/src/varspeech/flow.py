"""Time-wise affine coupling flow conditioned on the prior's last hidden state.

Convention: ``forward`` maps a data-side latent ``z`` to base noise ``u`` and
returns ``log|det du/dz|``; sampling runs ``inverse``.
"""

from __future__ import annotations

import torch
from torch import nn

from .distributions import DiagGaussian, log_prob, sample, scale_temperature


class FlowNumericError(FloatingPointError):
    pass


class CouplingBlock(nn.Module):
    """Affine coupling on contiguous halves with a FiLM-conditioned MLP.

    Odd ``d`` uses an uneven split: the conditioning half gets ``d // 2``
    coordinates and the transformed half the rest.
    """

    def __init__(self, d: int, d_ctx: int, hidden: int = 64, swap: bool = False, s_max: float = 3.0):
        super().__init__()
        if d < 2:
            raise ValueError("coupling needs d >= 2")
        self.d, self.d_ctx, self.swap, self.s_max = d, d_ctx, swap, s_max
        self.n_cond = d // 2 if not swap else d - d // 2
        self.n_out = d - self.n_cond
        self.inp = nn.Linear(self.n_cond, hidden)
        self.film = nn.Linear(d_ctx, 2 * hidden)
        self.mid = nn.Linear(hidden, hidden)
        self.out = nn.Linear(hidden, 2 * self.n_out)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def _split(self, x):
        if self.swap:
            return x[..., self.n_out:], x[..., :self.n_out]
        return x[..., :self.n_cond], x[..., self.n_cond:]

    def _join(self, cond, moved):
        return torch.cat([moved, cond] if self.swap else [cond, moved], dim=-1)

    def _shift_log_scale(self, cond, context):
        scale, shift = self.film(context).chunk(2, dim=-1)
        h = self.inp(cond) * (1.0 + scale) + shift
        h = torch.nn.functional.gelu(h)
        h = torch.nn.functional.gelu(self.mid(h))
        t, raw = self.out(h).chunk(2, dim=-1)
        return t, self.s_max * torch.tanh(raw / self.s_max)

    def forward(self, z, context):
        cond, x = self._split(z)
        t, s = self._shift_log_scale(cond, context)
        return self._join(cond, x * torch.exp(s) + t), s.sum(-1)

    def inverse(self, u, context):
        cond, y = self._split(u)
        t, s = self._shift_log_scale(cond, context)
        return self._join(cond, (y - t) * torch.exp(-s)), -s.sum(-1)


class FlowStack(nn.Module):
    def __init__(self, d: int, d_ctx: int, n_blocks: int = 4, hidden: int = 64, s_max: float = 3.0):
        super().__init__()
        self.d, self.d_ctx = d, d_ctx
        self.blocks = nn.ModuleList(
            CouplingBlock(d, d_ctx, hidden, swap=bool(i % 2), s_max=s_max) for i in range(n_blocks))

    def _check(self, x, context):
        if x.shape[-1] != self.d or context.shape[-1] != self.d_ctx:
            raise ValueError(f"flow expects d={self.d}, d_ctx={self.d_ctx}; "
                             f"got {x.shape[-1]}, {context.shape[-1]}")

    def forward(self, z, context):
        self._check(z, context)
        log_det = torch.zeros(z.shape[:-1], dtype=z.dtype, device=z.device)
        for i, block in enumerate(self.blocks):
            z, ld = block(z, context)
            if not torch.isfinite(z).all():
                raise FlowNumericError(f"non-finite output in flow block {i}")
            log_det = log_det + ld
        return z, log_det

    def inverse(self, u, context, return_log_det: bool = False):
        self._check(u, context)
        log_det = torch.zeros(u.shape[:-1], dtype=u.dtype, device=u.device)
        for i in reversed(range(len(self.blocks))):
            u, ld = self.blocks[i].inverse(u, context)
            if not torch.isfinite(u).all():
                raise FlowNumericError(f"non-finite output in flow block {i} (inverse)")
            log_det = log_det + ld
        return (u, log_det) if return_log_det else u


def flow_log_prob(fs: FlowStack | None, z, base: DiagGaussian, context) -> torch.Tensor:
    """Density of ``z`` under the flow-lifted base Gaussian (log domain)."""
    if fs is None or len(fs.blocks) == 0:
        return log_prob(base, z)
    u, log_det = fs(z, context)
    return log_prob(base, u) + log_det


def flow_sample(fs: FlowStack | None, base: DiagGaussian, context, tau: float = 1.0,
                generator: torch.Generator | None = None) -> torch.Tensor:
    u = sample(scale_temperature(base, tau), generator)
    if fs is None or len(fs.blocks) == 0:
        return u
    return fs.inverse(u, context)
