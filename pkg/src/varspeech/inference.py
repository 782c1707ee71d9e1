"""Reconstruction, continuation and paired likelihood scoring with a trained bundle."""

from __future__ import annotations

import numpy as np
import torch

from .data import FeatureSequence, UtterancePair
from .decoder import ddim_sample, ddpm_loss
from .encoder import posterior_mode
from .prior import MODES, rollout, sequence_log_likelihood
from .runtime import ModelBundle

PROMPT_SECONDS = 3.0


def _generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def _frames(x) -> np.ndarray:
    return x.frames if isinstance(x, FeatureSequence) else np.asarray(x, dtype=np.float32)


@torch.no_grad()
def encode_frames(bundle: ModelBundle, frames_batch: list[np.ndarray]):
    """Standardized input, tokens and posterior-mode latents for equal-length utterances."""
    model = bundle.model
    x = torch.stack([bundle.standardize(f) for f in frames_batch])
    tokens = torch.stack([bundle.tokens_for(f) for f in frames_batch]) if model.uses_tokens else None
    latents = posterior_mode(model.encoder(x)) if model.uses_latents else None
    return x, tokens, latents


@torch.no_grad()
def decode(bundle: ModelBundle, tokens, latents, utt, seed: int = 0) -> np.ndarray:
    """DDIM-decode conditioning to de-standardized frames ``[B, T, d_x]``.

    Every row uses its own generator seeded with ``seed``, so a row's output
    does not depend on the rest of the batch.
    """
    c = bundle.config
    dec = bundle.model.decoder
    cond = dec.conditioning(tokens, latents, utt)
    gens = [_generator(seed) for _ in range(cond.shape[0])]
    x0 = ddim_sample(dec.net, cond, dec.schedule, c.ddim_steps, c.ddim_eta, gens, clip_x0=c.ddim_clip)
    return np.stack([bundle.stats.destandardize(row.float().numpy()) for row in x0]).astype(np.float32)


@torch.no_grad()
def validation_ddpm_loss(bundle: ModelBundle, sequences, draws: int = 4, seed: int = 0) -> float:
    """Mean noise-prediction loss on held-out utterances.

    Diffusion steps and noise come from a generator seeded with ``seed``, so
    successive checkpoints are compared on the same draws.
    """
    seqs = [_frames(s) for s in (sequences.utterances if hasattr(sequences, "utterances") else sequences)]
    if not seqs:
        raise ValueError("validation_ddpm_loss needs at least one sequence")
    dec = bundle.model.decoder
    by_len: dict[int, list[np.ndarray]] = {}
    for f in seqs:
        by_len.setdefault(len(f), []).append(f)
    g = _generator(seed)
    total, count = 0.0, 0
    for length in sorted(by_len):
        x, tokens, latents = encode_frames(bundle, by_len[length])
        cond = dec.conditioning(tokens, latents, bundle.model.utt_encoder(x))
        for _ in range(draws):
            steps = torch.randint(1, dec.schedule.n_steps + 1, (x.shape[0],), generator=g)
            noise = torch.randn(x.shape, generator=g, dtype=x.dtype)
            total += float(ddpm_loss(dec.net, x, cond, dec.schedule, steps, noise, reduction="none").sum())
            count += x.shape[0]
    return total / count


@torch.no_grad()
def reconstruct_batch(bundle: ModelBundle, frames_batch: list[np.ndarray], seed: int = 0) -> np.ndarray:
    """Deterministic reconstruction from posterior means and the utterance's own embedding."""
    lengths = {len(f) for f in frames_batch}
    if len(lengths) != 1:
        raise ValueError("reconstruct_batch needs equal-length utterances")
    x, tokens, latents = encode_frames(bundle, frames_batch)
    utt = bundle.model.utt_encoder(x)
    return decode(bundle, tokens, latents, utt, seed)


def reconstruct(bundle: ModelBundle, seq, seed: int = 0) -> FeatureSequence:
    frames = _frames(seq)
    out = reconstruct_batch(bundle, [frames], seed)[0]
    src = seq.source_id if isinstance(seq, FeatureSequence) else ""
    return FeatureSequence(out, bundle.config.frame_rate_hz, f"{src}:reconstruction")


@torch.no_grad()
def continue_speech(bundle: ModelBundle, prompt, target_seconds: float = 10.0, seed: int = 0,
                    prompt_seconds: float | None = PROMPT_SECONDS) -> FeatureSequence:
    """Continue ``prompt`` by ``target_seconds`` of new frames.

    The prompt is cropped to its first ``prompt_seconds`` (``None`` keeps it
    whole). The output holds the prompt region, re-rendered by the decoder,
    followed by exactly ``round(target_seconds * frame_rate)`` new frames.
    """
    c = bundle.config
    frames = _frames(prompt)
    if prompt_seconds is not None:
        frames = frames[: max(1, int(round(prompt_seconds * c.frame_rate_hz)))]
    if len(frames) < 1:
        raise ValueError("prompt must hold at least one frame")
    if target_seconds < 0:
        raise ValueError("target_seconds must be >= 0")
    n_new = int(round(target_seconds * c.frame_rate_hz))
    g = _generator(seed)
    x, tokens, latents = encode_frames(bundle, [frames])
    model = bundle.model
    tokens, latents = rollout(model.prior, model.flow, tokens, latents, n_new, c.temp_token, c.temp_latent, g)
    utt = model.utt_encoder(x)
    out = decode(bundle, tokens, latents, utt, seed=int(torch.randint(2**31 - 1, (1,), generator=g)))[0]
    src = prompt.source_id if isinstance(prompt, FeatureSequence) else ""
    return FeatureSequence(out, c.frame_rate_hz, f"{src}:continuation")


def default_score_mode(bundle: ModelBundle) -> str:
    return "latents_only" if bundle.config.variant == "token_free" else "tokens_only"


@torch.no_grad()
def sequence_scores(bundle: ModelBundle, sequences: list[np.ndarray], mode: str | None = None) -> np.ndarray:
    """Length-normalised prior log-likelihood of each sequence."""
    mode = mode or default_score_mode(bundle)
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    model = bundle.model
    if mode != "latents_only" and not model.uses_tokens:
        raise ValueError(f"mode {mode!r} needs a token-bearing variant")
    if mode != "tokens_only" and not model.uses_latents:
        raise ValueError(f"mode {mode!r} needs continuous latents")
    scores = np.empty(len(sequences))
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(sequences):
        by_len.setdefault(len(s), []).append(i)
    for idx in by_len.values():
        _, tokens, latents = encode_frames(bundle, [sequences[i] for i in idx])
        if mode == "tokens_only":
            latents = latents if model.variant == "full" else None
        ll = sequence_log_likelihood(model.prior, model.flow, tokens, latents, mode)
        scores[idx] = ll.double().numpy()
    return scores


def score_pairs(bundle: ModelBundle, pairs: list[UtterancePair], mode: str | None = None) -> float:
    """Fraction of pairs whose positive member scores higher; ties count one half."""
    if not pairs:
        raise ValueError("score_pairs needs at least one pair")
    pos = sequence_scores(bundle, [_frames(p.positive) for p in pairs], mode)
    neg = sequence_scores(bundle, [_frames(p.negative) for p in pairs], mode)
    return float(np.mean(np.where(pos > neg, 1.0, np.where(pos == neg, 0.5, 0.0))))
