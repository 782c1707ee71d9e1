"""Figures written to files: training curves, metric sweeps, per-utterance reports."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LOSS_KEYS = ("total", "rec_loss", "kl_c", "nll_d")
SWEEP_METRICS = ("mcd", "f0_rmse", "token_content_error", "kl_c")


def read_log(path) -> list[dict]:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    if not rows:
        raise ValueError(f"{path} holds no log records")
    return rows


def plot_training_log(records: list[dict], out_path) -> Path:
    fig, axes = plt.subplots(1, len(LOSS_KEYS) + 1, figsize=(4 * (len(LOSS_KEYS) + 1), 3.2))
    steps = [r["step"] for r in records]
    for ax, key in zip(axes, LOSS_KEYS):
        ax.plot(steps, [r[key] for r in records], lw=1)
        ax.set_title(key)
        ax.set_xlabel("step")
    axes[-1].plot(steps, [r["beta_effective"] for r in records], label="beta")
    axes[-1].plot(steps, [r["lr"] for r in records], label="lr")
    axes[-1].set_yscale("log")
    axes[-1].set_title("schedules")
    axes[-1].legend()
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path


def plot_sweep(rows: list[dict], param: str, out_path, metrics=SWEEP_METRICS) -> Path:
    """One panel per metric against a swept hyperparameter (rows may repeat a value per seed)."""
    metrics = [m for m in metrics if any(r.get(m) is not None for r in rows)]
    fig, axes = plt.subplots(1, len(metrics), figsize=(3.6 * len(metrics), 3.2), squeeze=False)
    values = sorted({r[param] for r in rows})
    for ax, m in zip(axes[0], metrics):
        xs = [r[param] for r in rows if r.get(m) is not None]
        ys = [r[m] for r in rows if r.get(m) is not None]
        ax.scatter(xs, ys, s=12, alpha=0.6)
        means = []
        for v in values:
            vals = [r[m] for r in rows if r[param] == v and r.get(m) is not None]
            means.append(sum(vals) / len(vals) if vals else float("nan"))
        ax.plot(values, means, marker="o")
        ax.set_xscale("log")
        ax.set_xlabel(param)
        ax.set_title(m)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path


def plot_report(report, out_path) -> Path:
    rows = [r for r in report.per_utterance if r.get("error") is None]
    keys = [k for k in ("mcd", "f0_rmse", "token_content_error") if any(r.get(k) is not None for r in rows)]
    fig, axes = plt.subplots(1, max(len(keys), 1), figsize=(3.6 * max(len(keys), 1), 3.0), squeeze=False)
    for ax, key in zip(axes[0], keys):
        ax.hist([r[key] for r in rows if r.get(key) is not None], bins=20)
        ax.set_title(key)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path
