"""k-means semantic tokenizer over per-frame features.

Token ids are 0-based array indices (``0 .. k-1``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import FeatureSequence

FEATURE_KINDS = ("raw_frame", "context_window")
CONTEXT_RADIUS = 2


@dataclass
class Codebook:
    centroids: np.ndarray
    feature_kind: str = "raw_frame"
    seed: int = 0
    fit_stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 2:
            raise ValueError("codebook needs k >= 2 centroids")
        if self.feature_kind not in FEATURE_KINDS:
            raise ValueError(f"unknown feature_kind {self.feature_kind!r}")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def d_feat(self) -> int:
        return self.centroids.shape[1]

    def save(self, path) -> None:
        path = Path(path)
        np.save(path.with_suffix(".npy"), self.centroids)
        header = {"k": self.k, "d_feat": self.d_feat, "feature_kind": self.feature_kind,
                  "seed": self.seed, "fit_stats": self.fit_stats}
        path.with_suffix(".json").write_text(json.dumps(header, indent=1))

    @classmethod
    def load(cls, path) -> "Codebook":
        path = Path(path)
        header = json.loads(path.with_suffix(".json").read_text())
        centroids = np.load(path.with_suffix(".npy"))
        if centroids.shape != (header["k"], header["d_feat"]):
            raise ValueError(f"{path}: centroid array {centroids.shape} disagrees with header")
        return cls(centroids, header["feature_kind"], header["seed"], header.get("fit_stats", {}))


@dataclass
class TokenSequence:
    tokens: np.ndarray
    k: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= self.k):
            raise ValueError(f"token out of range [0, {self.k})")

    def __len__(self) -> int:
        return len(self.tokens)


def frame_features(frames: np.ndarray, feature_kind: str = "raw_frame") -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if feature_kind == "raw_frame":
        return frames
    if feature_kind == "context_window":
        padded = np.pad(frames, ((CONTEXT_RADIUS, CONTEXT_RADIUS), (0, 0)), mode="edge")
        T = frames.shape[0]
        return np.concatenate([padded[i:i + T] for i in range(2 * CONTEXT_RADIUS + 1)], axis=1)
    raise ValueError(f"unknown feature_kind {feature_kind!r}")


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++: each new centre is the best of ``2 + log k`` D^2-weighted draws."""
    n_trials = 2 + int(np.log(k))
    centers = [x[rng.integers(len(x))]]
    closest = _sq_dists(x, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.choice(len(x), size=n_trials)
        else:
            idx = rng.choice(len(x), size=n_trials, p=closest / total)
        cand = np.minimum(closest[None, :], _sq_dists(x, x[idx]).T)
        best = int(cand.sum(1).argmin())
        centers.append(x[idx[best]])
        closest = cand[best]
    return np.array(centers)


def _lloyd(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int, tol: float):
    centroids = _kmeans_pp(x, k, rng)
    history = []
    iterations = 0
    for iterations in range(1, max_iter + 1):
        d = _sq_dists(x, centroids)
        assign = d.argmin(1)
        history.append(float(d[np.arange(len(x)), assign].sum()))
        counts = np.bincount(assign, minlength=k)
        for empty in np.flatnonzero(counts == 0):
            big = int(counts.argmax())
            members = np.flatnonzero(assign == big)
            far = members[d[members, big].argmax()]
            assign[far] = empty
            counts[big] -= 1
            counts[empty] += 1
        new = np.zeros_like(centroids)
        np.add.at(new, assign, x)
        new /= counts[:, None]
        shift = float(np.sqrt(((new - centroids) ** 2).sum(1)).max())
        centroids = new
        if shift < tol:
            break
    # exact residuals for the reported inertia (the expanded form leaves rounding residue)
    assign = _sq_dists(x, centroids).argmin(1)
    inertia = float(((x - centroids[assign]) ** 2).sum())
    history.append(inertia)
    return centroids, inertia, iterations, history


def fit_codebook(sample, k: int = 200, seed: int = 0, max_iter: int = 100, tol: float = 1e-6,
                 feature_kind: str = "raw_frame", n_init: int = 10) -> Codebook:
    """k-means++ seeded Lloyd iterations, best of ``n_init`` restarts by inertia.

    ``sample`` may be a frame matrix or a list of FeatureSequence/arrays.
    Empty clusters are repaired by moving the farthest point of the largest
    cluster into them, so ``k`` never shrinks.
    """
    if isinstance(sample, np.ndarray) and sample.ndim == 2:
        x = frame_features(sample, feature_kind)
    else:
        x = np.concatenate([frame_features(s.frames if isinstance(s, FeatureSequence) else s, feature_kind)
                            for s in sample], axis=0)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite features in k-means sample")
    if k < 2:
        raise ValueError("k must be >= 2")
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    n_distinct = len(np.unique(x, axis=0))
    if n_distinct < k:
        raise ValueError(f"only {n_distinct} distinct frames for k={k}")

    best = None
    for child in np.random.SeedSequence(seed).spawn(n_init):
        run = _lloyd(x, k, np.random.default_rng(child), max_iter, tol)
        if best is None or run[1] < best[1]:
            best = run
    centroids, inertia, iterations, history = best
    return Codebook(centroids, feature_kind, seed,
                    {"inertia": inertia, "iterations": iterations, "inertia_history": history})


def assign_nearest(features: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # exact per-centroid differences keep ties and near-ties faithful
    best = np.full(len(features), np.inf)
    arg = np.zeros(len(features), dtype=np.int64)
    for j, c in enumerate(centroids):
        d = ((features - c) ** 2).sum(1)
        better = d < best
        best[better] = d[better]
        arg[better] = j
    return arg


def tokenize(X, cb: Codebook) -> TokenSequence:
    frames = X.frames if isinstance(X, FeatureSequence) else np.asarray(X)
    feats = frame_features(frames, cb.feature_kind)
    if feats.shape[1] != cb.d_feat:
        raise ValueError(f"feature dim {feats.shape[1]} does not match codebook d_feat {cb.d_feat}")
    return TokenSequence(assign_nearest(feats, cb.centroids), cb.k)


def sample_frames(sequences, frac: float, seed: int = 0) -> list[np.ndarray]:
    """Random utterance subset (at least one) used to fit the codebook."""
    rng = np.random.default_rng(seed)
    n = max(1, int(round(frac * len(sequences))))
    idx = np.sort(rng.choice(len(sequences), size=n, replace=False))
    return [sequences[i].frames if isinstance(sequences[i], FeatureSequence) else sequences[i] for i in idx]
