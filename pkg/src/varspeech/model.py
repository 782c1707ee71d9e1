"""The composite model: posterior, utterance encoder, prior + flow, decoder."""

from __future__ import annotations

import torch
from torch import nn

from .config import Config
from .decoder import DiffusionDecoder
from .encoder import PosteriorEncoder, UtteranceEncoder
from .flow import FlowStack
from .prior import PriorTransformer


class VariationalSpeechModel(nn.Module):
    """Holds every trainable component for one variant.

    ``encoder`` and ``flow`` are ``None`` for the token-only baseline, which
    has no continuous latents.
    """

    def __init__(self, config: Config, d_x: int):
        super().__init__()
        self.config, self.d_x, self.variant = config, d_x, config.variant
        self.uses_tokens = config.variant != "token_free"
        self.uses_latents = config.variant != "token_only"
        c = config
        self.encoder = PosteriorEncoder(d_x, c.d_z, c.enc_width, c.enc_blocks, c.kernel) if self.uses_latents else None
        self.utt_encoder = UtteranceEncoder(d_x, c.utt_widths)
        self.prior = PriorTransformer(c.k, c.d_z, c.variant, c.prior_width, c.prior_layers, c.prior_heads,
                                      c.prior_ff, c.prior_token_emb or None)
        self.flow = (FlowStack(c.d_z, c.prior_width, c.flow_blocks, c.flow_hidden, c.flow_s_max)
                     if self.uses_latents and c.flow_blocks > 0 else None)
        self.decoder = DiffusionDecoder(d_x, c.k, c.d_z, self.utt_encoder.d_u, c.variant, c.dec_width,
                                        c.dec_blocks, c.kernel, c.dec_token_emb, c.diffusion_steps)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Parameters split into posterior / prior (+flow) / decoder / utterance encoder."""
        groups = {
            "posterior": list(self.encoder.parameters()) if self.encoder is not None else [],
            "prior": list(self.prior.parameters()) + (list(self.flow.parameters()) if self.flow is not None else []),
            "decoder": list(self.decoder.parameters()),
            "utterance": list(self.utt_encoder.parameters()),
        }
        return groups


def build_model(config: Config, d_x: int, seed: int | None = None) -> VariationalSpeechModel:
    if seed is None:
        seed = config.seed
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = VariationalSpeechModel(config, d_x)
    return model.to(torch.float64 if config.dtype == "float64" else torch.float32)
