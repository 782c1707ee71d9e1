"""Autoregressive prior over joint (token, latent) frames.

A causal transformer reads ``[BOS, frame_1, ..., frame_{T-1}]`` and its output
at position ``t`` parameterises the next token (categorical head) and the next
continuous latent (Gaussian head, optionally lifted by the flow).  The two
heads share the hidden state and are otherwise independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .distributions import DiagGaussian, kl_divergence, log_prob, sample
from .flow import FlowStack, flow_log_prob, flow_sample

VARIANTS = ("full", "token_free", "token_only")
MODES = ("tokens_only", "latents_only", "joint")


def alibi_slopes(n_heads: int) -> torch.Tensor:
    def pow2(n):
        start = 2.0 ** (-8.0 / n)
        return [start ** (i + 1) for i in range(n)]

    if math.log2(n_heads).is_integer():
        slopes = pow2(n_heads)
    else:
        closest = 2 ** math.floor(math.log2(n_heads))
        slopes = pow2(closest) + pow2(2 * closest)[0::2][: n_heads - closest]
    return torch.tensor(slopes)


class CausalSelfAttention(nn.Module):
    def __init__(self, width: int, n_heads: int):
        super().__init__()
        if width % n_heads:
            raise ValueError("width must be divisible by n_heads")
        self.n_heads, self.head_dim = n_heads, width // n_heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.register_buffer("slopes", alibi_slopes(n_heads), persistent=False)

    def forward(self, x):
        B, T, D = x.shape
        q, k, v = self.qkv(x).view(B, T, 3, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        pos = torch.arange(T)
        dist = (pos[:, None] - pos[None, :]).to(x.dtype)
        bias = -self.slopes.to(x.dtype)[:, None, None] * dist
        bias = bias.masked_fill(dist < 0, float("-inf"))
        att = torch.softmax(scores + bias, dim=-1)
        return self.proj((att @ v).transpose(1, 2).reshape(B, T, D))


class PostLNLayer(nn.Module):
    def __init__(self, width: int, n_heads: int, ff: int):
        super().__init__()
        self.attn = CausalSelfAttention(width, n_heads)
        self.norm1 = nn.RMSNorm(width)
        self.ff = nn.Sequential(nn.Linear(width, ff), nn.GELU(), nn.Linear(ff, width))
        self.norm2 = nn.RMSNorm(width)

    def forward(self, x):
        x = self.norm1(x + self.attn(x))
        return self.norm2(x + self.ff(x))


@dataclass
class PriorStepOutput:
    token_logits: torch.Tensor | None
    cont_base: DiagGaussian | None
    context: torch.Tensor


@dataclass
class PriorOutputs:
    """Per-step prior outputs for a batch, shaped ``[B, T, ...]``."""

    token_logits: torch.Tensor | None
    cont_base: DiagGaussian | None
    context: torch.Tensor

    def __len__(self):
        return self.context.shape[1]

    def step(self, t: int) -> PriorStepOutput:
        return PriorStepOutput(
            None if self.token_logits is None else self.token_logits[:, t],
            None if self.cont_base is None else self.cont_base[:, t],
            self.context[:, t])


class PriorTransformer(nn.Module):
    def __init__(self, k: int, d_z: int, variant: str = "full", width: int = 256, n_layers: int = 4,
                 n_heads: int = 8, ff: int = 1024, token_emb_dim: int | None = None):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        self.k, self.d_z, self.variant, self.width = k, d_z, variant, width
        self.uses_tokens = variant != "token_free"
        self.uses_latents = variant != "token_only"
        emb = token_emb_dim or width
        in_dim = 0
        if self.uses_tokens:
            self.token_emb = nn.Embedding(k, emb)
            in_dim += emb
        if self.uses_latents:
            in_dim += d_z
        self.in_proj = nn.Linear(in_dim, width)
        self.bos = nn.Parameter(torch.randn(width) * 0.02)
        self.layers = nn.ModuleList(PostLNLayer(width, n_heads, ff) for _ in range(n_layers))
        self.token_head = nn.Linear(width, k) if self.uses_tokens else None
        self.cont_head = nn.Linear(width, 2 * d_z) if self.uses_latents else None

    def embed_frames(self, tokens, latents):
        parts = []
        if self.uses_tokens:
            if tokens is None:
                raise ValueError(f"variant {self.variant} needs tokens")
            if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.k):
                raise ValueError(f"token out of range [0, {self.k})")
            parts.append(self.token_emb(tokens))
        if self.uses_latents:
            if latents is None:
                raise ValueError(f"variant {self.variant} needs latents")
            parts.append(latents)
        return self.in_proj(torch.cat(parts, dim=-1))

    def forward(self, tokens: torch.Tensor | None = None, latents: torch.Tensor | None = None) -> PriorOutputs:
        """Teacher-forced outputs; position ``t`` sees frames ``< t`` only."""
        ref = tokens if tokens is not None else latents
        if ref is None or ref.shape[1] == 0:
            raise ValueError("prior needs a non-empty sequence")
        B, T = ref.shape[:2]
        h = self.embed_frames(
            None if tokens is None else tokens[:, :-1],
            None if latents is None else latents[:, :-1])
        bos = self.bos.to(h.dtype).expand(B, 1, self.width)
        h = torch.cat([bos, h], dim=1)
        for layer in self.layers:
            h = layer(h)
        logits = self.token_head(h) if self.token_head is not None else None
        base = None
        if self.cont_head is not None:
            mean, log_std = self.cont_head(h).chunk(2, dim=-1)
            base = DiagGaussian(mean, log_std)
        return PriorOutputs(logits, base, h)


def prior_forward(prior: PriorTransformer, tokens=None, latents=None) -> PriorOutputs:
    return prior(tokens, latents)


def token_nll(outputs: PriorOutputs, tokens: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Categorical negative log-likelihood of ``tokens`` under the token head."""
    if outputs.token_logits is None:
        raise ValueError("prior has no token head")
    k = outputs.token_logits.shape[-1]
    if tokens.min() < 0 or tokens.max() >= k:
        raise ValueError(f"token out of range [0, {k})")
    logp = F.log_softmax(outputs.token_logits, dim=-1)
    nll = -logp.gather(-1, tokens[..., None])[..., 0]
    if reduction == "none":
        return nll
    if reduction == "sum":
        return nll.sum()
    return nll.mean()


def continuous_step_kl(q: DiagGaussian, outputs: PriorOutputs, flow: FlowStack | None,
                       z: torch.Tensor | None = None, n_mc: int = 1,
                       generator: torch.Generator | None = None) -> torch.Tensor:
    """Per-step KL(q_t || p_t), shape ``[B, T]``.

    Without flow blocks the KL is the exact closed form.  With a flow it is a
    Monte-Carlo average of ``log q(z) - log p(z)``; pass ``z`` to reuse the
    latents already drawn for the rest of the objective.
    """
    if outputs.cont_base is None:
        raise ValueError("prior has no continuous head")
    if flow is None or len(flow.blocks) == 0:
        return kl_divergence(q, outputs.cont_base)
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    draws = [z] if z is not None else [sample(q, generator) for _ in range(n_mc)]
    est = [log_prob(q, zi) - flow_log_prob(flow, zi, outputs.cont_base, outputs.context) for zi in draws]
    return torch.stack(est).mean(0)


def sample_token(logits: torch.Tensor, tau: float, generator: torch.Generator | None = None) -> torch.Tensor:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if tau < 1e-4:
        return logits.argmax(-1)
    probs = torch.softmax(logits.double() / tau, dim=-1)
    return torch.multinomial(probs, 1, generator=generator)[..., 0]


@torch.no_grad()
def prior_sample_step(prior: PriorTransformer, flow: FlowStack | None, tokens, latents,
                      tau_d: float = 0.85, tau_c: float = 0.85,
                      generator: torch.Generator | None = None):
    """Draw frame ``T+1`` given a prefix of ``T`` frames (``T`` may be 0).

    Returns ``(token [B] | None, latent [B, d_z] | None)``.
    """
    if not (tau_d > 0 and tau_c > 0):
        raise ValueError("temperatures must be positive")
    ref = tokens if tokens is not None else latents
    B = ref.shape[0]
    pad_tok = None if tokens is None else torch.cat([tokens, tokens.new_zeros(B, 1)], dim=1)
    pad_lat = None if latents is None else torch.cat([latents, latents.new_zeros(B, 1, latents.shape[-1])], dim=1)
    out = prior(pad_tok, pad_lat).step(-1)
    token = sample_token(out.token_logits, tau_d, generator) if out.token_logits is not None else None
    latent = flow_sample(flow, out.cont_base, out.context, tau_c, generator) if out.cont_base is not None else None
    return token, latent


@torch.no_grad()
def rollout(prior: PriorTransformer, flow: FlowStack | None, tokens, latents, n_new: int,
            tau_d: float = 0.85, tau_c: float = 0.85, generator: torch.Generator | None = None):
    """Extend a prefix by exactly ``n_new`` frames."""
    for _ in range(n_new):
        tok, lat = prior_sample_step(prior, flow, tokens, latents, tau_d, tau_c, generator)
        if tok is not None:
            tokens = torch.cat([tokens, tok[:, None]], dim=1)
        if lat is not None:
            latents = torch.cat([latents, lat[:, None]], dim=1)
    return tokens, latents


def sequence_log_likelihood(prior: PriorTransformer, flow: FlowStack | None, tokens=None, latents=None,
                            mode: str = "tokens_only") -> torch.Tensor:
    """Length-normalised log-likelihood per sequence, shape ``[B]``."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    out = prior(tokens, latents)
    T = len(out)
    total = torch.zeros(out.context.shape[0], dtype=out.context.dtype)
    if mode in ("tokens_only", "joint"):
        total = total - token_nll(out, tokens, reduction="none").sum(-1)
    if mode in ("latents_only", "joint"):
        if out.cont_base is None:
            raise ValueError("latents_only scoring needs a continuous head")
        total = total + flow_log_prob(flow, latents, out.cont_base, out.context).sum(-1)
    return total / T
