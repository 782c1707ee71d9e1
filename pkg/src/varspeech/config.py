"""Run configuration: one flat, validated dataclass serialised as YAML."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import yaml

from .prior import VARIANTS


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    variant: str = "full"
    seed: int = 0
    dtype: str = "float32"

    # data
    frame_rate_hz: float = 50.0
    crop_frames: int = 256
    batch_size: int = 16
    utt_crop_seconds: tuple[float, float] = (2.0, 4.0)

    # tokenizer
    k: int = 200
    feature_kind: str = "raw_frame"
    sample_frac: float = 0.1
    kmeans_max_iter: int = 100

    # latent + encoders
    d_z: int = 4
    enc_width: int = 64
    enc_blocks: int = 3
    kernel: int = 7
    utt_widths: tuple[int, ...] = (32, 64, 64)

    # prior
    prior_layers: int = 4
    prior_heads: int = 8
    prior_width: int = 256
    prior_ff: int = 1024
    prior_token_emb: int = 0  # 0 -> prior_width
    flow_blocks: int = 4
    flow_hidden: int = 64
    flow_s_max: float = 3.0

    # decoder
    dec_width: int = 64
    dec_blocks: int = 6
    dec_token_emb: int = 32
    diffusion_steps: int = 1000

    # objective
    beta: float = 0.04
    gamma: float = 0.5
    warmup_frac: float = 0.05

    # optimisation
    steps: int = 20000
    lr: float = 5e-4
    lr_final: float = 5e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    weight_decay: float = 0.01
    grad_clip: float = 1.0

    # inference
    temp_token: float = 0.85
    temp_latent: float = 0.85
    ddim_eta: float = 0.5
    ddim_steps: int = 100
    ddim_clip: float = 6.0

    # bookkeeping
    checkpoint_every: int = 1000
    log_every: int = 10

    def __post_init__(self):
        self.utt_crop_seconds = tuple(float(v) for v in self.utt_crop_seconds)
        self.utt_widths = tuple(int(v) for v in self.utt_widths)
        self.validate()

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_frac * self.steps))

    @property
    def d_u(self) -> int:
        return self.utt_widths[-1]

    def validate(self) -> None:
        positive_ints = ["crop_frames", "batch_size", "k", "d_z", "enc_width", "enc_blocks", "kernel",
                         "prior_layers", "prior_heads", "prior_width", "prior_ff", "flow_hidden",
                         "dec_width", "dec_blocks", "dec_token_emb", "diffusion_steps", "steps",
                         "ddim_steps", "checkpoint_every", "log_every", "kmeans_max_iter"]
        for name in positive_ints:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        rules = {
            "variant": self.variant in VARIANTS,
            "dtype": self.dtype in ("float32", "float64"),
            "k": self.k >= 2,
            "frame_rate_hz": self.frame_rate_hz > 0,
            "utt_crop_seconds": len(self.utt_crop_seconds) == 2 and 0 < self.utt_crop_seconds[0] <= self.utt_crop_seconds[1],
            "feature_kind": self.feature_kind in ("raw_frame", "context_window"),
            "sample_frac": 0 < self.sample_frac <= 1,
            "utt_widths": len(self.utt_widths) == 3 and min(self.utt_widths) >= 1,
            "prior_width": self.prior_width % self.prior_heads == 0,
            "prior_token_emb": self.prior_token_emb >= 0,
            "flow_blocks": self.flow_blocks >= 0,
            "flow_s_max": self.flow_s_max > 0,
            "dec_blocks": self.dec_blocks % 2 == 0,
            "beta": self.beta >= 0,
            "gamma": self.gamma >= 0,
            "warmup_frac": 0 <= self.warmup_frac <= 1,
            "lr": self.lr > 0,
            "lr_final": 0 < self.lr_final <= self.lr,
            "adam_beta1": 0 <= self.adam_beta1 < 1,
            "adam_beta2": 0 <= self.adam_beta2 < 1,
            "weight_decay": self.weight_decay >= 0,
            "grad_clip": self.grad_clip >= 0,
            "temp_token": self.temp_token > 0,
            "temp_latent": self.temp_latent > 0,
            "ddim_eta": 0 <= self.ddim_eta <= 1,
            "ddim_steps": self.ddim_steps <= self.diffusion_steps,
            "ddim_clip": self.ddim_clip > 0,
        }
        for name, ok in rules.items():
            if not ok:
                raise ConfigError(f"invalid {name}: {getattr(self, name)!r}")

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["utt_crop_seconds"] = list(self.utt_crop_seconds)
        d["utt_widths"] = list(self.utt_widths)
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_yaml(cls, text: str) -> "Config":
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "Config":
        return cls.from_yaml(Path(path).read_text())


def micro_config(**overrides) -> Config:
    """Small CPU-friendly configuration used by tests and smoke runs."""
    base = dict(
        k=12, d_z=4, crop_frames=64, batch_size=16, enc_width=32, utt_widths=(16, 32, 32),
        prior_layers=2, prior_heads=4, prior_width=64, prior_ff=128, prior_token_emb=32,
        flow_hidden=32, dec_width=48, dec_token_emb=16, steps=2000, ddim_steps=50,
        utt_crop_seconds=(1.0, 2.0), checkpoint_every=500, log_every=10, lr=1e-3, lr_final=1e-4,
    )
    base.update(overrides)
    return Config(**base)
