"""Training objective: reconstruction surrogate plus balanced KL / token terms."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .decoder import ddpm_loss
from .distributions import log_prob
from .encoder import sample_posterior
from .flow import flow_log_prob
from .prior import continuous_step_kl, token_nll


@dataclass
class Batch:
    x: torch.Tensor                     # standardized features [B, T, d_x]
    tokens: torch.Tensor | None         # [B, T]
    utt_x: torch.Tensor                 # utterance-encoder input [B, T_u, d_x]


@dataclass
class BetaSchedule:
    beta_final: float
    warmup_steps: int = 0

    def __post_init__(self):
        if self.beta_final < 0 or self.warmup_steps < 0:
            raise ValueError("beta_final and warmup_steps must be non-negative")


def beta_at(sched: BetaSchedule, step: int) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    if sched.warmup_steps == 0:
        return sched.beta_final
    return sched.beta_final * min(1.0, step / sched.warmup_steps)


def _item(v) -> float:
    return float(v.detach()) if torch.is_tensor(v) else float(v)


@dataclass
class ElboTerms:
    rec_loss: torch.Tensor
    kl_c: torch.Tensor
    nll_d: torch.Tensor
    beta_effective: float
    gamma: float
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {"rec_loss": _item(self.rec_loss), "kl_c": _item(self.kl_c), "nll_d": _item(self.nll_d),
                "beta_effective": float(self.beta_effective), "gamma": float(self.gamma),
                "total": _item(self.total)}


def combine(rec_loss, kl_c, nll_d, beta: float, gamma: float):
    return rec_loss + beta * (kl_c + gamma * nll_d)


def compute_loss(batch: Batch, model, beta_sched: BetaSchedule, gamma: float, step: int,
                 generator: torch.Generator | None = None, variant: str | None = None,
                 diffusion_generator: torch.Generator | None = None) -> ElboTerms:
    """One stochastic evaluation of the balanced objective (to be minimised).

    ``generator`` drives the posterior sample; ``diffusion_generator`` (falls
    back to ``generator``) drives the diffusion step and noise.
    """
    variant = variant or model.variant
    if variant != model.variant:
        raise ValueError(f"model was built for {model.variant!r}, asked for {variant!r}")
    diffusion_generator = diffusion_generator or generator
    x = batch.x
    zero = x.new_zeros(())
    utt = model.utt_encoder(batch.utt_x)

    z = q = None
    if model.uses_latents:
        q = model.encoder(x)
        z = sample_posterior(q, generator)
    tokens = batch.tokens if model.uses_tokens else None
    if model.uses_tokens and tokens is None:
        raise ValueError(f"variant {variant!r} needs tokens in the batch")

    out = model.prior(tokens, z)
    kl_c = continuous_step_kl(q, out, model.flow, z=z).mean() if model.uses_latents else zero
    nll_d = token_nll(out, tokens) if model.uses_tokens else zero

    dec = model.decoder
    cond = dec.conditioning(tokens, z, utt)
    B = x.shape[0]
    steps = torch.randint(1, dec.schedule.n_steps + 1, (B,), generator=diffusion_generator)
    noise = torch.randn(x.shape, generator=diffusion_generator, dtype=x.dtype)
    # per-frame: channel-summed L1, averaged over frames, like the KL and token terms
    rec = ddpm_loss(dec.net, x, cond, dec.schedule, steps, noise) * x.shape[-1]

    if variant == "token_only":
        beta, g = 1.0, 1.0
    else:
        beta = beta_at(beta_sched, step)
        g = gamma if variant == "full" else 0.0
    total = combine(rec, kl_c, nll_d, beta, g)
    return ElboTerms(rec, kl_c, nll_d, beta, g, total)


# ---------------------------------------------------------------------------
# sequence-level KL and importance-weighted bounds


def latent_log_weights(model, x, tokens, n_samples: int, generator: torch.Generator | None = None,
                       loglik_fn=None, token_term: bool = True):
    """Per-sample ``log p(X|Z) + log p(Z) - log q(Z|X)``, shape ``[n_samples, B]``.

    ``loglik_fn(z) -> [B]`` supplies a tractable decoder likelihood; when it
    is ``None`` the weights reduce to ``log p(Z) - log q(Z|X)`` (the negative
    sequence-level KL integrand).
    """
    q = model.encoder(x)
    rows = []
    for _ in range(n_samples):
        z = sample_posterior(q, generator)
        out = model.prior(tokens if model.uses_tokens else None, z)
        log_prior = flow_log_prob(model.flow, z, out.cont_base, out.context).sum(-1)
        if model.uses_tokens and token_term:
            log_prior = log_prior - token_nll(out, tokens, reduction="none").sum(-1)
        w = log_prior - log_prob(q, z).sum(-1)
        if loglik_fn is not None:
            w = w + loglik_fn(z)
        rows.append(w)
    return torch.stack(rows)


def joint_sequence_kl_samples(model, x, n_samples: int, generator=None, tokens=None) -> torch.Tensor:
    """Samples of ``log q(Z^c|X) - log p(Z^c)`` over whole sequences, ``[n_samples, B]``."""
    return -latent_log_weights(model, x, tokens, n_samples, generator, token_term=False)


def stepwise_kl_samples(model, x, n_samples: int, generator=None, tokens=None) -> torch.Tensor:
    """Samples of the per-step KL sum with prefixes drawn from the posterior, ``[n_samples, B]``."""
    q = model.encoder(x)
    rows = []
    for _ in range(n_samples):
        z = sample_posterior(q, generator)
        out = model.prior(tokens if model.uses_tokens else None, z)
        rows.append(continuous_step_kl(q, out, model.flow, n_mc=1, generator=generator).sum(-1))
    return torch.stack(rows)


def importance_weighted_bound(log_w: torch.Tensor) -> torch.Tensor:
    """``log (1/K) sum_k exp(w_k)`` over the leading axis."""
    return torch.logsumexp(log_w, dim=0) - math.log(log_w.shape[0])
