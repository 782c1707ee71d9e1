"""Feature ingestion, the synthetic corpus and discrimination pairs.

Features are mel-like matrices of shape ``[T, d_x]``.  The synthetic corpus is
a sticky Markov chain over "phone states", each emitting a spectral template,
plus a few smooth prosody channels that play the role of pitch.  Because the
generator keeps its ground truth, every metric in :mod:`varspeech.evaluate`
has an oracle counterpart.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

LOG_FLOOR = float(np.log(1e-5))
CORPUS_FORMAT = "varspeech-corpus-1"


class UnsupportedSampleRate(ValueError):
    pass


@dataclass
class FeatureSequence:
    frames: np.ndarray
    frame_rate_hz: float = 50.0
    source_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be [T>=1, d_x], got shape {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError(f"non-finite entries in features of {self.source_id!r}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def __len__(self) -> int:
        return self.num_frames


@dataclass
class SynthCorpusSpec:
    num_utterances: int = 64
    num_phone_states: int = 12
    d_x: int = 20
    prosody_channels: int = 4
    transition_stickiness: float = 0.9
    noise_scale: float = 0.1
    seed: int = 0
    frames_per_utterance: int = 200
    frame_rate_hz: float = 50.0
    template_scale: float = 1.0
    prosody_smoothness: float = 0.97
    static_offset_scale: float = 0.5

    def validate(self) -> None:
        checks = {
            "num_utterances": self.num_utterances >= 1,
            "num_phone_states": self.num_phone_states >= 2,
            "prosody_channels": self.prosody_channels >= 1,
            "d_x": self.d_x > self.prosody_channels,
            "transition_stickiness": 0.0 < self.transition_stickiness < 1.0,
            "noise_scale": self.noise_scale >= 0.0,
            "frames_per_utterance": self.frames_per_utterance >= 1,
            "frame_rate_hz": self.frame_rate_hz > 0.0,
            "template_scale": self.template_scale > 0.0,
            "prosody_smoothness": 0.0 <= self.prosody_smoothness < 1.0,
            "static_offset_scale": self.static_offset_scale >= 0.0,
        }
        for name, ok in checks.items():
            if not ok:
                raise ValueError(f"invalid SynthCorpusSpec.{name}: {getattr(self, name)!r}")


@dataclass
class SynthCorpus:
    """Generated utterances together with the generator's ground truth."""

    spec: SynthCorpusSpec
    utterances: list[FeatureSequence]
    states: list[np.ndarray]
    prosody: list[np.ndarray]
    templates: np.ndarray
    transition: np.ndarray
    initial: np.ndarray

    @property
    def spectral_dims(self) -> int:
        return self.spec.d_x - self.spec.prosody_channels

    @property
    def prosody_slice(self) -> slice:
        return slice(self.spectral_dims, self.spec.d_x)

    def __len__(self) -> int:
        return len(self.utterances)

    def markov_log_prob(self, states: np.ndarray, start: int = 0, stop: int | None = None) -> float:
        """Log-probability of the transitions touching ``states[start:stop]``."""
        stop = len(states) if stop is None else stop
        lo = max(start, 1)
        hi = min(stop + 1, len(states))
        logp = np.log(self.transition)
        total = float(np.sum(logp[states[lo - 1:hi - 1], states[lo:hi]]))
        if start == 0:
            total += float(np.log(self.initial[states[0]]))
        return total


@dataclass
class UtterancePair:
    positive: FeatureSequence
    negative: FeatureSequence
    pair_id: str
    positive_states: np.ndarray | None = None
    negative_states: np.ndarray | None = None


@dataclass
class CorpusStats:
    """Per-channel standardization statistics computed on training data."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, sequences, min_std: float = 1e-3) -> "CorpusStats":
        stacked = np.concatenate([_frames(s) for s in sequences], axis=0).astype(np.float64)
        return cls(stacked.mean(axis=0).astype(np.float32),
                   np.maximum(stacked.std(axis=0), min_std).astype(np.float32))

    def standardize(self, frames: np.ndarray) -> np.ndarray:
        return ((frames - self.mean) / self.std).astype(np.float32)

    def destandardize(self, frames: np.ndarray) -> np.ndarray:
        return (frames * self.std + self.mean).astype(np.float32)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusStats":
        return cls(np.asarray(d["mean"], np.float32), np.asarray(d["std"], np.float32))


def _frames(x) -> np.ndarray:
    return x.frames if isinstance(x, FeatureSequence) else np.asarray(x)


# ---------------------------------------------------------------------------
# synthetic corpus


def make_transition_matrix(num_states: int, stickiness: float, rng: np.random.Generator) -> np.ndarray:
    """Sticky transitions with two preferred successors per state.

    Successors follow a random cyclic ordering of the states (next and
    next-but-one), which makes the matrix doubly stochastic: every state is
    equally frequent in the long run. The directed structure is what makes
    reversed or resampled spans recognisably implausible to a trained prior.
    """
    n = num_states
    order = rng.permutation(n)
    pos = np.empty(n, dtype=np.int64)
    pos[order] = np.arange(n)
    off = np.zeros((n, n))
    if n > 3:
        off[:] = 0.05 / (n - 3)
    for i in range(n):
        first = order[(pos[i] + 1) % n]
        off[i, first] = 0.75
        if n > 2:
            off[i, order[(pos[i] + 2) % n]] = 0.20
        off[i, i] = 0.0
    off /= off.sum(axis=1, keepdims=True)
    return (1.0 - stickiness) * off + stickiness * np.eye(n)


def make_templates(num_states: int, n_spec: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Per-state spectral templates with per-entry spread ``scale``.

    When there are enough channels the templates are scaled rows of a random
    orthogonal matrix, so every pair of states is equally far apart and no two
    states are accidentally confusable.
    """
    if n_spec < num_states:
        return rng.normal(0.0, scale, size=(num_states, n_spec))
    q, _ = np.linalg.qr(rng.standard_normal((n_spec, n_spec)))
    return q[:num_states] * scale * np.sqrt(n_spec)


def sample_states(length: int, transition: np.ndarray, initial: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(transition, axis=1)
    states = np.empty(length, dtype=np.int64)
    states[0] = rng.choice(len(initial), p=initial)
    u = rng.random(length)
    for t in range(1, length):
        states[t] = min(int(np.searchsorted(cdf[states[t - 1]], u[t], side="right")), len(initial) - 1)
    return states


def _smooth_walk(length: int, channels: int, rho: float, rng: np.random.Generator) -> np.ndarray:
    innov = rng.standard_normal((length, channels)) * np.sqrt(1.0 - rho ** 2)
    out = np.empty((length, channels))
    out[0] = rng.standard_normal(channels)
    for t in range(1, length):
        out[t] = rho * out[t - 1] + innov[t]
    return out


def generate_synth_corpus(spec: SynthCorpusSpec) -> SynthCorpus:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_spec = spec.d_x - spec.prosody_channels
    templates = make_templates(spec.num_phone_states, n_spec, spec.template_scale, rng)
    transition = make_transition_matrix(spec.num_phone_states, spec.transition_stickiness, rng)
    initial = np.full(spec.num_phone_states, 1.0 / spec.num_phone_states)

    # one child stream per utterance so generation can shard by index
    children = np.random.SeedSequence(spec.seed).spawn(spec.num_utterances)
    utterances, states_all, prosody_all = [], [], []
    for i, child in enumerate(children):
        urng = np.random.default_rng(child)
        states = sample_states(spec.frames_per_utterance, transition, initial, urng)
        noise = urng.standard_normal((spec.frames_per_utterance, n_spec)) * spec.noise_scale
        offset = urng.standard_normal(spec.prosody_channels) * spec.static_offset_scale
        prosody = offset + _smooth_walk(spec.frames_per_utterance, spec.prosody_channels,
                                        spec.prosody_smoothness, urng)
        frames = np.concatenate([templates[states] + noise, prosody], axis=1)
        utterances.append(FeatureSequence(frames, spec.frame_rate_hz, f"utt{i:05d}"))
        states_all.append(states)
        prosody_all.append(prosody.astype(np.float32))
    return SynthCorpus(spec, utterances, states_all, prosody_all, templates, transition, initial)


def split_corpus(corpus: SynthCorpus, n_valid: int) -> tuple[SynthCorpus, SynthCorpus]:
    def take(sl):
        return SynthCorpus(corpus.spec, corpus.utterances[sl], corpus.states[sl], corpus.prosody[sl],
                           corpus.templates, corpus.transition, corpus.initial)
    n_train = len(corpus) - n_valid
    if n_train < 1 or n_valid < 0:
        raise ValueError(f"cannot split {len(corpus)} utterances with n_valid={n_valid}")
    return take(slice(0, n_train)), take(slice(n_train, None))


# ---------------------------------------------------------------------------
# discrimination pairs


def _implausible_successor(corpus: SynthCorpus, state: int, rng: np.random.Generator) -> int:
    row = corpus.transition[state].copy()
    row[state] = np.inf
    candidates = np.flatnonzero(row <= np.min(row) + 1e-12)
    return int(rng.choice(candidates))


def _resample_span(corpus: SynthCorpus, states: np.ndarray, start: int, stop: int,
                   rng: np.random.Generator) -> np.ndarray:
    new = states.copy()
    prev = int(states[start - 1]) if start > 0 else int(states[start])
    current = _implausible_successor(corpus, prev, rng)
    stick = corpus.spec.transition_stickiness
    for t in range(start, stop):
        if t > start and rng.random() > stick:
            current = _implausible_successor(corpus, current, rng)
        new[t] = current
    return new


def _render(corpus: SynthCorpus, frames: np.ndarray, old_states: np.ndarray, new_states: np.ndarray) -> np.ndarray:
    # keep the original noise realisation and prosody; swap only the templates
    n_spec = corpus.spectral_dims
    out = frames.copy()
    noise = frames[:, :n_spec] - corpus.templates[old_states]
    out[:, :n_spec] = corpus.templates[new_states] + noise
    return out


def make_discrimination_pairs(corpus: SynthCorpus, corruption: str = "resample_states",
                              span_frames: int = 20, seed: int = 0,
                              num_pairs: int | None = None) -> list[UtterancePair]:
    """Build (well-formed, corrupted) pairs from a synthetic corpus.

    ``resample_states`` replaces a span with a sticky chain that only takes the
    least likely transitions; ``swap_span`` reverses the order of the states in
    a span, which turns preferred transitions into dispreferred ones.
    """
    if corruption not in ("resample_states", "swap_span"):
        raise ValueError(f"unknown corruption {corruption!r}")
    if span_frames < 0:
        raise ValueError("span_frames must be non-negative")
    rng = np.random.default_rng(seed)
    n = len(corpus) if num_pairs is None else num_pairs
    pairs = []
    for i in range(n):
        j = i % len(corpus)
        utt, states = corpus.utterances[j], corpus.states[j]
        T = len(states)
        if span_frames > T:
            raise ValueError(f"span of {span_frames} frames longer than utterance {utt.source_id} ({T})")
        start = int(rng.integers(0, T - span_frames + 1))
        stop = start + span_frames
        if span_frames == 0:
            new_states = states.copy()
        elif corruption == "resample_states":
            new_states = _resample_span(corpus, states, start, stop, rng)
        else:
            new_states = states.copy()
            new_states[start:stop] = states[start:stop][::-1]
        frames = _render(corpus, utt.frames, states, new_states)
        neg = FeatureSequence(frames, utt.frame_rate_hz, f"{utt.source_id}-neg{i}")
        pairs.append(UtterancePair(utt, neg, f"pair{i:05d}", states, new_states))
    return pairs


# ---------------------------------------------------------------------------
# waveform ingestion


@dataclass
class FeatureConfig:
    sample_rate: int = 16000
    n_fft: int = 1024
    hop: int = 320
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(config: FeatureConfig) -> np.ndarray:
    """The ``n_mels + 2`` band edge frequencies; band ``m`` peaks at edge ``m + 1``."""
    return mel_to_hz(np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2))


def mel_filterbank(config: FeatureConfig) -> np.ndarray:
    edges = mel_band_edges(config)
    freqs = np.arange(config.n_fft // 2 + 1) * config.sample_rate / config.n_fft
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (center - lo)
    falling = (hi - freqs[None, :]) / (hi - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def wav_to_features(audio, sample_rate: int, config: FeatureConfig | None = None,
                    source_id: str = "") -> FeatureSequence:
    config = config or FeatureConfig()
    audio = np.asarray(audio, dtype=np.float64).reshape(-1)
    if audio.size == 0:
        raise ValueError("empty audio")
    if sample_rate <= 0 or sample_rate != config.sample_rate:
        raise UnsupportedSampleRate(
            f"sample rate {sample_rate} Hz does not match configured {config.sample_rate} Hz; resample first")
    if config.fmax > sample_rate / 2:
        raise UnsupportedSampleRate(f"fmax {config.fmax} exceeds Nyquist for {sample_rate} Hz")
    pad = config.n_fft // 2
    mode = "reflect" if audio.size > pad else "constant"
    padded = np.pad(audio, pad, mode=mode)
    n_frames = (padded.size - config.n_fft) // config.hop + 1
    idx = np.arange(config.n_fft)[None, :] + config.hop * np.arange(n_frames)[:, None]
    window = np.hanning(config.n_fft + 1)[:-1]
    mag = np.abs(np.fft.rfft(padded[idx] * window, axis=1))
    mel = mag @ mel_filterbank(config).T
    feats = np.log(np.maximum(mel, np.exp(LOG_FLOOR)))
    return FeatureSequence(feats, sample_rate / config.hop, source_id)


# ---------------------------------------------------------------------------
# on-disk corpus


def write_feature_file(path, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<ii", *frames.shape))
        fh.write(frames.tobytes())


def read_feature_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        T, d = struct.unpack("<ii", fh.read(8))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != T * d:
        raise ValueError(f"{path}: header says {T}x{d} but holds {data.size} values")
    return data.reshape(T, d).astype(np.float32)


def _write_truth(path, states: np.ndarray, prosody: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<ii", len(states), prosody.shape[1]))
        fh.write(np.ascontiguousarray(states, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(prosody, dtype="<f4").tobytes())


def _read_truth(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        T, P = struct.unpack("<ii", fh.read(8))
        states = np.frombuffer(fh.read(4 * T), dtype="<i4").astype(np.int64)
        prosody = np.frombuffer(fh.read(4 * T * P), dtype="<f4").reshape(T, P).astype(np.float32)
    return states, prosody


def save_corpus(directory, corpus, stats: CorpusStats | None = None) -> Path:
    """Write features (and ground truth, for synthetic corpora) plus a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    utterances = corpus.utterances if isinstance(corpus, SynthCorpus) else list(corpus)
    entries = []
    for i, utt in enumerate(utterances):
        name = utt.source_id or f"utt{i:05d}"
        write_feature_file(directory / f"{name}.f32", utt.frames)
        entry = {"id": name, "T": utt.num_frames, "path": f"{name}.f32"}
        if isinstance(corpus, SynthCorpus):
            _write_truth(directory / f"{name}.truth", corpus.states[i], corpus.prosody[i])
            entry["truth"] = f"{name}.truth"
        entries.append(entry)
    manifest = {
        "format": CORPUS_FORMAT,
        "d_x": utterances[0].dim,
        "frame_rate_hz": utterances[0].frame_rate_hz,
        "utterances": entries,
    }
    if isinstance(corpus, SynthCorpus):
        manifest["synth"] = {
            "spec": asdict(corpus.spec),
            "templates": corpus.templates.tolist(),
            "transition": corpus.transition.tolist(),
            "initial": corpus.initial.tolist(),
        }
    if stats is not None:
        manifest["stats"] = stats.to_dict()
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return directory


def load_corpus(directory):
    """Load a corpus directory; returns a SynthCorpus when ground truth is present."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != CORPUS_FORMAT:
        raise ValueError(f"{manifest_path}: unknown corpus format {manifest.get('format')!r}")
    rate = float(manifest["frame_rate_hz"])
    utterances = [FeatureSequence(read_feature_file(directory / e["path"]), rate, e["id"])
                  for e in manifest["utterances"]]
    if "synth" not in manifest:
        return utterances
    synth = manifest["synth"]
    states, prosody = zip(*(_read_truth(directory / e["truth"]) for e in manifest["utterances"]))
    return SynthCorpus(SynthCorpusSpec(**synth["spec"]), utterances, list(states), list(prosody),
                       np.asarray(synth["templates"]), np.asarray(synth["transition"]),
                       np.asarray(synth["initial"]))


def load_corpus_stats(directory) -> CorpusStats | None:
    manifest = json.loads((Path(directory) / "manifest.json").read_text())
    return CorpusStats.from_dict(manifest["stats"]) if "stats" in manifest else None


PAIRS_FORMAT = "varspeech-pairs-1"


def save_pairs(directory, pairs: list[UtterancePair]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for p in pairs:
        write_feature_file(directory / f"{p.pair_id}.pos.f32", p.positive.frames)
        write_feature_file(directory / f"{p.pair_id}.neg.f32", p.negative.frames)
        entries.append({"id": p.pair_id, "positive": p.positive.source_id, "negative": p.negative.source_id})
    rate = pairs[0].positive.frame_rate_hz if pairs else 50.0
    manifest = {"format": PAIRS_FORMAT, "frame_rate_hz": rate, "pairs": entries}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return directory


def load_pairs(directory) -> list[UtterancePair]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != PAIRS_FORMAT:
        raise ValueError(f"{manifest_path}: not a pairs directory")
    rate = float(manifest["frame_rate_hz"])
    return [UtterancePair(FeatureSequence(read_feature_file(directory / f"{e['id']}.pos.f32"), rate, e["positive"]),
                          FeatureSequence(read_feature_file(directory / f"{e['id']}.neg.f32"), rate, e["negative"]),
                          e["id"])
            for e in manifest["pairs"]]
