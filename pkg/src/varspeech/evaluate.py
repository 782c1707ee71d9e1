"""Reconstruction metrics (F0-RMSE, MCD, token-content error) and report writing."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from rapidfuzz.distance import Levenshtein
from scipy.fft import dct

from .data import FeatureSequence, SynthCorpus
from .tokenizer import Codebook, tokenize

log = logging.getLogger(__name__)

MCD_SCALE = 10.0 * math.sqrt(2.0) / math.log(10.0)


def _frames(x) -> np.ndarray:
    return np.asarray(x.frames if isinstance(x, FeatureSequence) else x, dtype=np.float64)


def _aligned(ref, syn) -> tuple[np.ndarray, np.ndarray]:
    a, b = _frames(ref), _frames(syn)
    n = min(len(a), len(b))
    return a[:n], b[:n]


# ---------------------------------------------------------------------------
# pitch


def autocorrelation_pitch(audio, sample_rate: int, frame_length: int = 1024, hop: int = 320,
                          fmin: float = 60.0, fmax: float = 400.0, threshold: float = 0.3):
    """Per-frame F0 (Hz) and voicing from the normalised autocorrelation peak.

    Frames are centred like the feature extractor. A frame is voiced when its
    best normalised autocorrelation in the ``[fmin, fmax]`` lag range reaches
    ``threshold``; unvoiced frames get F0 0.
    """
    audio = np.asarray(audio, dtype=np.float64)
    if audio.ndim != 1 or audio.size == 0:
        raise ValueError("audio must be a non-empty 1-D signal")
    pad = frame_length // 2
    x = np.pad(audio, pad, mode="reflect" if audio.size > pad else "constant")
    n_frames = 1 + (len(x) - frame_length) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, frame_length)[::hop][:n_frames]
    frames = frames - frames.mean(axis=1, keepdims=True)
    lag_lo = max(1, int(math.floor(sample_rate / fmax)))
    lag_hi = min(frame_length - 1, int(math.ceil(sample_rate / fmin)))
    spec = np.fft.rfft(frames, n=2 * frame_length, axis=1)
    ac = np.fft.irfft(np.abs(spec) ** 2, axis=1)[:, :frame_length]
    # unbiased normalisation: divide by the energy of the overlapping parts
    sq = np.cumsum(frames[:, ::-1] ** 2, axis=1)[:, ::-1]
    energy = np.sqrt(sq[:, :1] * sq)
    norm = np.divide(ac, energy, out=np.zeros_like(ac), where=energy > 1e-12)
    band = norm[:, lag_lo:lag_hi + 1]
    best = band.argmax(axis=1)
    peak = band[np.arange(len(band)), best]
    lag = (best + lag_lo).astype(np.float64)
    # parabolic refinement of the peak lag
    inner = (best > 0) & (best < band.shape[1] - 1)
    i = np.nonzero(inner)[0]
    y0, y1, y2 = band[i, best[i] - 1], band[i, best[i]], band[i, best[i] + 1]
    denom = y0 - 2 * y1 + y2
    lag[i] += np.divide(0.5 * (y0 - y2), denom, out=np.zeros_like(denom), where=np.abs(denom) > 1e-12)
    voiced = peak >= threshold
    f0 = np.where(voiced, sample_rate / lag, 0.0)
    return f0, voiced


def prosody_rmse(ref, syn, channels=slice(-1, None)) -> float:
    a, b = _aligned(ref, syn)
    return float(np.sqrt(np.mean((a[:, channels] - b[:, channels]) ** 2)))


def f0_rmse(ref, syn, sample_rate: int | None = None, channels=slice(-1, None), **pitch_kwargs) -> float | None:
    """Pitch-contour RMSE over frames voiced in both inputs.

    With ``sample_rate`` the inputs are waveforms and pitch comes from
    :func:`autocorrelation_pitch`; ``None`` is returned when no frame is
    voiced in both. Without it the inputs are feature matrices and the error is
    taken over the prosody ``channels``, with every frame treated as voiced.
    """
    if sample_rate is None:
        return prosody_rmse(ref, syn, channels)
    f_ref, v_ref = autocorrelation_pitch(ref, sample_rate, **pitch_kwargs)
    f_syn, v_syn = autocorrelation_pitch(syn, sample_rate, **pitch_kwargs)
    n = min(len(f_ref), len(f_syn))
    both = v_ref[:n] & v_syn[:n]
    if not both.any():
        return None
    return float(np.sqrt(np.mean((f_ref[:n][both] - f_syn[:n][both]) ** 2)))


# ---------------------------------------------------------------------------
# cepstral distortion


def mel_cepstrum(log_mel: np.ndarray, n_coeffs: int = 23) -> np.ndarray:
    """Coefficients ``1..n_coeffs`` of the orthonormal DCT-II of log-mel frames."""
    c = dct(np.asarray(log_mel, dtype=np.float64), type=2, norm="ortho", axis=-1)
    return c[:, 1:n_coeffs + 1]


def mcd(ref, syn, n_coeffs: int = 23) -> float:
    """Mean frame-wise mel-cepstral distortion in dB."""
    a, b = _aligned(ref, syn)
    available = a.shape[1] - 1
    if available < n_coeffs:
        warnings.warn(f"only {available} cepstral coefficients available, {n_coeffs} requested", stacklevel=2)
    diff = mel_cepstrum(a, n_coeffs) - mel_cepstrum(b, n_coeffs)
    return float(MCD_SCALE * np.mean(np.sqrt(np.sum(diff ** 2, axis=1))))


# ---------------------------------------------------------------------------
# token-content error


def collapse_runs(tokens) -> list[int]:
    tokens = [int(t) for t in tokens]
    return [t for i, t in enumerate(tokens) if i == 0 or t != tokens[i - 1]]


def run_edit_error(ref_tokens, syn_tokens) -> float:
    """Edit distance between run-collapsed strings over the number of reference runs."""
    r, s = collapse_runs(ref_tokens), collapse_runs(syn_tokens)
    if not r:
        return 0.0 if not s else float(len(s))
    return Levenshtein.distance(r, s) / len(r)


def token_content_error(ref, syn, cb: Codebook, stats=None) -> float:
    """Tokenize both sequences (after ``stats`` standardization, if given) and compare runs."""
    a, b = _aligned(ref, syn)
    if stats is not None:
        a, b = stats.standardize(a), stats.standardize(b)
    return run_edit_error(tokenize(a, cb).tokens, tokenize(b, cb).tokens)


# ---------------------------------------------------------------------------
# report


@dataclass
class ReconReport:
    f0_rmse: float | None
    mcd: float
    token_content_error: float
    per_utterance: list[dict] = field(default_factory=list)
    n_failed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def utterance_metrics(ref: np.ndarray, syn: np.ndarray, bundle, corpus=None) -> dict:
    spectral = corpus.spectral_dims if isinstance(corpus, SynthCorpus) else ref.shape[1]
    n_coeffs = min(23, spectral - 1)
    row = {
        "mcd": mcd(ref[:, :spectral], syn[:, :spectral], n_coeffs),
        "token_content_error": token_content_error(ref, syn, bundle.codebook, bundle.stats),
        "f0_rmse": None,
    }
    if isinstance(corpus, SynthCorpus):
        row["f0_rmse"] = f0_rmse(ref, syn, channels=corpus.prosody_slice)
    return row


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def eval_report(bundle, corpus, out_path=None, seed: int = 0, batch_size: int = 16,
                figure: bool = True) -> ReconReport:
    """Reconstruct every utterance deterministically and score it.

    With ``out_path`` the report is written as JSON, the per-utterance rows as
    TSV next to it, and (``figure=True``) a per-utterance metric figure.
    """
    from .inference import reconstruct_batch

    utts = corpus.utterances if isinstance(corpus, SynthCorpus) else list(corpus)
    utts = [u if isinstance(u, FeatureSequence)
            else FeatureSequence(np.asarray(u, np.float32), bundle.config.frame_rate_hz, f"utt{i:04d}")
            for i, u in enumerate(utts)]
    rows: list[dict] = [dict() for _ in utts]
    by_len: dict[int, list[int]] = {}
    for i, u in enumerate(utts):
        by_len.setdefault(len(u), []).append(i)
    for idx_all in by_len.values():
        for start in range(0, len(idx_all), batch_size):
            idx = idx_all[start:start + batch_size]
            refs = [utts[i].frames for i in idx]
            try:
                recs = reconstruct_batch(bundle, refs, seed)
            except Exception as exc:  # noqa: BLE001 - reported per utterance
                for i in idx:
                    rows[i] = {"error": f"{type(exc).__name__}: {exc}"}
                continue
            for i, ref, rec in zip(idx, refs, recs):
                try:
                    rows[i] = utterance_metrics(ref, rec, bundle, corpus)
                except Exception as exc:  # noqa: BLE001
                    rows[i] = {"error": f"{type(exc).__name__}: {exc}"}
    for u, row in zip(utts, rows):
        row["source_id"] = u.source_id
        row.setdefault("error", None)
    ok = [r for r in rows if r["error"] is None]
    report = ReconReport(
        f0_rmse=_mean(r["f0_rmse"] for r in ok),
        mcd=_mean(r["mcd"] for r in ok),
        token_content_error=_mean(r["token_content_error"] for r in ok),
        per_utterance=rows,
        n_failed=len(rows) - len(ok),
    )
    if out_path is not None:
        write_report(report, out_path, figure=figure)
    return report


REPORT_COLUMNS = ("source_id", "f0_rmse", "mcd", "token_content_error", "error")


def write_report(report: ReconReport, out_path, figure: bool = True) -> None:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(out_path.with_suffix(".tsv"), "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for row in report.per_utterance:
            w.writerow(["" if row.get(c) is None else row.get(c) for c in REPORT_COLUMNS])
        w.writerow(["# mean", report.f0_rmse, report.mcd, report.token_content_error, f"failed={report.n_failed}"])
    if figure:
        from .plotting import plot_report

        plot_report(report, out_path.with_suffix(".png"))
