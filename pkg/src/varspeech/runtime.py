"""Training loop, RNG streams and the single-file checkpoint container."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import Config
from .data import CorpusStats, FeatureSequence, SynthCorpus
from .model import VariationalSpeechModel, build_model
from .objective import Batch, BetaSchedule, beta_at, compute_loss
from .tokenizer import Codebook, fit_codebook, sample_frames, tokenize

log = logging.getLogger(__name__)

STREAMS = ("data", "posterior", "diffusion", "sampling")
CHECKPOINT_MAGIC = b"VSPKCKPT"
TERMS = ("rec_loss", "kl_c", "nll_d", "total")


class TrainingDivergedError(FloatingPointError):
    pass


class RngStreams:
    """Named torch generators fanned out from one root seed."""

    def __init__(self, seed: int):
        children = np.random.SeedSequence(seed).spawn(len(STREAMS))
        self.generators = {}
        for name, child in zip(STREAMS, children):
            g = torch.Generator()
            g.manual_seed(int(child.generate_state(1, np.uint32)[0]))
            self.generators[name] = g

    def __getitem__(self, name: str) -> torch.Generator:
        return self.generators[name]

    def get_state(self) -> dict[str, torch.Tensor]:
        return {name: g.get_state() for name, g in self.generators.items()}

    def set_state(self, states: dict[str, torch.Tensor]) -> None:
        for name, state in states.items():
            self.generators[name].set_state(state)


@dataclass
class ModelBundle:
    config: Config
    model: VariationalSpeechModel
    codebook: Codebook
    stats: CorpusStats
    d_x: int
    step: int = 0
    optimizer: torch.optim.Optimizer | None = None
    rngs: RngStreams | None = None
    history: list[dict] = field(default_factory=list)

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.config.dtype == "float64" else torch.float32

    def standardize(self, frames: np.ndarray) -> torch.Tensor:
        return torch.as_tensor(self.stats.standardize(frames), dtype=self.dtype)

    def tokens_for(self, frames: np.ndarray) -> torch.Tensor:
        std = self.stats.standardize(frames)
        return torch.as_tensor(tokenize(std, self.codebook).tokens)


def _utterance_frames(corpus) -> list[np.ndarray]:
    items = corpus.utterances if isinstance(corpus, SynthCorpus) else corpus
    return [u.frames if isinstance(u, FeatureSequence) else np.asarray(u, np.float32) for u in items]


def init_bundle(config: Config, corpus, codebook: Codebook | None = None,
                stats: CorpusStats | None = None) -> ModelBundle:
    """Fit standardization stats and the codebook (unless given) and build a fresh model."""
    frames = _utterance_frames(corpus)
    if not frames:
        raise ValueError("empty corpus")
    stats = stats or CorpusStats.fit(frames)
    if codebook is None:
        sample = [stats.standardize(f) for f in sample_frames(frames, config.sample_frac, config.seed)]
        codebook = fit_codebook(sample, config.k, seed=config.seed, max_iter=config.kmeans_max_iter,
                                feature_kind=config.feature_kind)
    if codebook.k != config.k:
        raise ValueError(f"codebook has k={codebook.k} but config asks for k={config.k}")
    d_x = frames[0].shape[1]
    return ModelBundle(config, build_model(config, d_x), codebook, stats, d_x)


class Batcher:
    """Random training crops plus utterance-encoder crops, driven by one generator."""

    def __init__(self, bundle: ModelBundle, corpus):
        frames = _utterance_frames(corpus)
        self.x = [bundle.standardize(f) for f in frames]
        self.tokens = [bundle.tokens_for(f) for f in frames]
        c = bundle.config
        self.batch_size = c.batch_size
        min_len = min(len(x) for x in self.x)
        self.crop = min(c.crop_frames, min_len)
        lo = max(1, int(round(c.utt_crop_seconds[0] * c.frame_rate_hz)))
        hi = max(lo, int(round(c.utt_crop_seconds[1] * c.frame_rate_hz)))
        self.utt_lo, self.utt_hi = min(lo, min_len), min(hi, min_len)

    def sample(self, g: torch.Generator) -> Batch:
        idx = torch.randint(len(self.x), (self.batch_size,), generator=g).tolist()
        utt_len = int(torch.randint(self.utt_lo, self.utt_hi + 1, (1,), generator=g))
        xs, toks, utts = [], [], []
        for i in idx:
            T = len(self.x[i])
            s = int(torch.randint(T - self.crop + 1, (1,), generator=g))
            u = int(torch.randint(T - utt_len + 1, (1,), generator=g))
            xs.append(self.x[i][s:s + self.crop])
            toks.append(self.tokens[i][s:s + self.crop])
            utts.append(self.x[i][u:u + utt_len])
        return Batch(torch.stack(xs), torch.stack(toks), torch.stack(utts))


def cosine_lr(config: Config, step: int) -> float:
    frac = min(step / max(config.steps, 1), 1.0)
    return config.lr_final + 0.5 * (config.lr - config.lr_final) * (1.0 + math.cos(math.pi * frac))


def make_optimizer(config: Config, model) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=config.lr, betas=(config.adam_beta1, config.adam_beta2),
                             weight_decay=config.weight_decay)


def train(config: Config, corpus=None, out_dir=None, codebook: Codebook | None = None,
          stats: CorpusStats | None = None, resume: ModelBundle | str | Path | None = None,
          stop_after: int | None = None, log_path=None) -> ModelBundle:
    """Optimise the balanced objective; resumable bitwise from any checkpoint.

    ``stop_after`` ends the run early at that global step (a checkpoint is
    written when ``out_dir`` is set), which is how interruption is simulated.
    """
    if resume is not None:
        bundle = load_checkpoint(resume) if not isinstance(resume, ModelBundle) else resume
        config = bundle.config
    else:
        if corpus is None:
            raise ValueError("train needs a corpus")
        bundle = init_bundle(config, corpus, codebook, stats)
        bundle.rngs = RngStreams(config.seed)
        bundle.optimizer = make_optimizer(config, bundle.model)
    if corpus is None:
        raise ValueError("train needs the corpus, also when resuming")
    model, opt, rngs = bundle.model, bundle.optimizer, bundle.rngs
    batcher = Batcher(bundle, corpus)
    sched = BetaSchedule(config.beta, config.warmup_steps)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = log_path or out_dir / "train_log.jsonl"
    log_fh = open(log_path, "a") if log_path is not None else None
    last = config.steps if stop_after is None else min(stop_after, config.steps)
    start = time.time()
    model.train()
    try:
        for step in range(bundle.step, last):
            batch = batcher.sample(rngs["data"])
            terms = compute_loss(batch, model, sched, config.gamma, step, rngs["posterior"],
                                 diffusion_generator=rngs["diffusion"])
            values = terms.as_floats()
            bad = [name for name in TERMS if not math.isfinite(values[name])]
            if bad:
                raise TrainingDivergedError(f"non-finite {', '.join(bad)} at step {step}: {values}")
            lr = cosine_lr(config, step)
            for group in opt.param_groups:
                group["lr"] = lr
            opt.zero_grad(set_to_none=True)
            terms.total.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            bundle.step = step + 1
            record = {"step": step, **values, "lr": lr, "wall_time": time.time() - start}
            bundle.history.append(record)
            if log_fh is not None and (step % config.log_every == 0 or step + 1 == last):
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if out_dir is not None and (bundle.step % config.checkpoint_every == 0 or bundle.step == last):
                save_checkpoint(out_dir / f"checkpoint_{bundle.step:07d}.vsk", bundle)
                save_checkpoint(out_dir / "last.vsk", bundle)
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    return bundle


def check_beta_trace(bundle: ModelBundle) -> bool:
    sched = BetaSchedule(bundle.config.beta, bundle.config.warmup_steps)
    return all(r["beta_effective"] == beta_at(sched, r["step"]) for r in bundle.history
               if bundle.config.variant != "token_only")


# ---------------------------------------------------------------------------
# checkpoint container: magic, u64 header length, JSON header, raw tensor bytes


def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().contiguous().numpy()


def write_container(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    entries, offset = [], 0
    names = sorted(tensors)
    for name in names:
        arr = np.require(tensors[name], requirements="C")  # ascontiguousarray would turn 0-d into 1-d
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name in names:
            fh.write(np.require(tensors[name], requirements="C").tobytes())


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n))
        blob = fh.read()
    tensors = {}
    for e in header["tensors"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return tensors, header["meta"]


def save_checkpoint(path, bundle: ModelBundle) -> None:
    tensors = {f"model/{k}": _np(v) for k, v in bundle.model.state_dict().items()}
    tensors["codebook/centroids"] = bundle.codebook.centroids
    tensors["stats/mean"] = bundle.stats.mean
    tensors["stats/std"] = bundle.stats.std
    meta = {
        "config": bundle.config.to_yaml(),
        "step": bundle.step,
        "d_x": bundle.d_x,
        "codebook": {"feature_kind": bundle.codebook.feature_kind, "seed": bundle.codebook.seed},
    }
    if bundle.optimizer is not None:
        sd = bundle.optimizer.state_dict()
        for pid, state in sd["state"].items():
            for key, val in state.items():
                tensors[f"optim/{pid}/{key}"] = _np(val) if torch.is_tensor(val) else np.asarray(val)
        groups = []
        for g in sd["param_groups"]:
            groups.append({k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()})
        meta["optimizer_groups"] = groups
    if bundle.rngs is not None:
        for name, state in bundle.rngs.get_state().items():
            tensors[f"rng/{name}"] = _np(state)
    write_container(path, tensors, meta)


def load_checkpoint(path) -> ModelBundle:
    tensors, meta = read_container(path)
    config = Config.from_yaml(meta["config"])
    model = build_model(config, meta["d_x"])
    state = {k[len("model/"):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("model/")}
    model.load_state_dict(state)
    codebook = Codebook(tensors["codebook/centroids"], meta["codebook"]["feature_kind"], meta["codebook"]["seed"])
    stats = CorpusStats(tensors["stats/mean"], tensors["stats/std"])
    bundle = ModelBundle(config, model, codebook, stats, meta["d_x"], meta["step"])
    if "optimizer_groups" in meta:
        opt = make_optimizer(config, model)
        opt_state: dict[int, dict] = {}
        for name, val in tensors.items():
            if name.startswith("optim/"):
                _, pid, key = name.split("/", 2)
                opt_state.setdefault(int(pid), {})[key] = torch.from_numpy(val)
        groups = [{k: (tuple(v) if k == "betas" else v) for k, v in g.items()} for g in meta["optimizer_groups"]]
        opt.load_state_dict({"state": opt_state, "param_groups": groups})
        bundle.optimizer = opt
    rng_states = {k[len("rng/"):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("rng/")}
    if rng_states:
        bundle.rngs = RngStreams(config.seed)
        bundle.rngs.set_state(rng_states)
    model.eval()
    return bundle
