"""
Modality-gap bridge
A diffusion MLP over audio-side embeddings: residual dense blocks with AdaLN
conditioning on the noise level and (optionally) the text-side embedding.
Training and sampling reuse the EDM machinery; samples are projected back to the
unit sphere.
"""
import logging
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from .dit import NoiseLevelEmbedder
from .edm import EDMDenoiser, EDMParams, ode_sample
from .exceptions import ContractViolation
from .models import ConditioningBundle, EmbeddingSet

logger = logging.getLogger(__name__)


class BridgeConfig(BaseModel):
    """Shape of the bridge network"""

    model_config = ConfigDict(extra="forbid")

    embed_dim: int = Field(64, gt=0)
    hidden_units: int = Field(256, gt=0)
    num_blocks: int = Field(8, gt=0)
    noise_embed_dim: int = Field(128, gt=0)
    cond_dropout: float = Field(0.1, ge=0, le=1)
    activation: Literal["swiglu"] = "swiglu"

    @classmethod
    def full_scale(cls) -> 'BridgeConfig':
        return cls(embed_dim=512, hidden_units=1024, num_blocks=8, noise_embed_dim=512)


class ResidualDenseBlock(nn.Module):
    """LayerNorm + AdaLN modulation, gated-linear dense pair, gated residual add"""

    def __init__(self, hidden: int, cond_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.dense_in = nn.Linear(hidden, 2 * hidden)
        self.dense_out = nn.Linear(hidden, hidden)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(cond_dim, 3 * hidden))

    def forward(self, h: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        shift, scale, gate = self.adaLN_modulation(c).chunk(3, dim=-1)
        x = self.norm(h) * (1 + scale) + shift
        value, gate_in = self.dense_in(x).chunk(2, dim=-1)
        return h + gate * self.dense_out(F.silu(gate_in) * value)


class BridgeNet(nn.Module):
    """
    Raw bridge network F(x, c_noise, cond)

    The text-side embedding travels in cond.style_embedding; it is projected and
    added to the noise-level embedding, so it only reaches the blocks via AdaLN.
    """

    def __init__(self, config: BridgeConfig):
        super().__init__()
        self.config = config
        hidden, cond_dim = config.hidden_units, config.noise_embed_dim
        self.input_proj = nn.Linear(config.embed_dim, hidden)
        self.noise_embedder = NoiseLevelEmbedder(cond_dim)
        self.text_proj = nn.Linear(config.embed_dim, cond_dim)
        self.null_text = nn.Parameter(torch.zeros(cond_dim))
        self.blocks = nn.ModuleList([ResidualDenseBlock(hidden, cond_dim) for _ in range(config.num_blocks)])
        self.final_norm = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.output_proj = nn.Linear(hidden, config.embed_dim)
        self.initialize_weights()

    def initialize_weights(self) -> None:
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.xavier_uniform_(module.weight)
                nn.init.zeros_(module.bias)
        nn.init.normal_(self.null_text, std=0.02)
        for block in self.blocks:
            nn.init.zeros_(block.adaLN_modulation[-1].weight)
            nn.init.zeros_(block.adaLN_modulation[-1].bias)
        nn.init.zeros_(self.output_proj.weight)
        nn.init.zeros_(self.output_proj.bias)

    def _text_embedding(self, cond: Optional[ConditioningBundle], batch: int) -> torch.Tensor:
        null = self.null_text.expand(batch, -1)
        if cond is None or cond.style_embedding is None:
            return null
        text = cond.style_embedding.to(self.null_text.dtype)
        if text.shape[-1] != self.config.embed_dim:
            raise ContractViolation(f"text embedding has dim {text.shape[-1]}, expected {self.config.embed_dim}")
        embedded = self.text_proj(text)
        if cond.drop_style is None:
            return embedded
        return torch.where(cond.drop_style.unsqueeze(-1), null, embedded)

    def forward(self, x: torch.Tensor, c_noise: torch.Tensor, cond: Optional[ConditioningBundle] = None) -> torch.Tensor:
        if x.ndim != 2 or x.shape[-1] != self.config.embed_dim:
            raise ContractViolation(f"expected (B, {self.config.embed_dim}) input, got {tuple(x.shape)}")
        batch = x.shape[0]
        c = self.noise_embedder(c_noise.reshape(-1).expand(batch)) + self._text_embedding(cond, batch)
        h = self.input_proj(x)
        for block in self.blocks:
            h = block(h, c)
        return self.output_proj(self.final_norm(h))


def build_bridge(config: BridgeConfig, params: EDMParams) -> EDMDenoiser:
    return EDMDenoiser(BridgeNet(config), params)


def bridge_sample(
    denoiser: EDMDenoiser,
    text_emb: Optional[torch.Tensor],
    count: int,
    num_steps: int,
    generator: torch.Generator,
    guidance_weight: float = 1.0,
) -> torch.Tensor:
    """
    Audio-side embeddings from the bridge, unit-normalized

    Args:
        denoiser: EDM-wrapped BridgeNet
        text_emb: (count, embed_dim) text-side embeddings, or None for unconditional samples
        count: Number of embeddings
        num_steps: Heun ladder length
        generator: Seeded generator
        guidance_weight: CFG weight (1.0 = plain conditional)

    Returns:
        (count, embed_dim) tensor of unit vectors
    """
    embed_dim = denoiser.network.config.embed_dim
    cond = None
    if text_emb is not None:
        if text_emb.shape != (count, embed_dim):
            raise ContractViolation(f"text embeddings {tuple(text_emb.shape)} do not match ({count}, {embed_dim})")
        cond = ConditioningBundle(style_embedding=text_emb)
    if count == 0:
        return torch.zeros(0, embed_dim)
    samples = ode_sample(denoiser, cond, (count, embed_dim), num_steps, guidance_weight, generator, denoiser.params)
    return F.normalize(samples, dim=-1)


@dataclass
class GapStats:
    centroid_distance: float
    mean_pairwise_cosine: float


def modality_gap_stats(text_set: EmbeddingSet, audio_set: EmbeddingSet) -> GapStats:
    """Centroid distance and mean matched-pair cosine between two paired sets"""
    if len(text_set) == 0 or len(audio_set) == 0:
        raise ContractViolation("modality gap statistics need non-empty sets")
    if text_set.dim != audio_set.dim:
        raise ContractViolation(f"dimension mismatch: {text_set.dim} vs {audio_set.dim}")
    if len(text_set) != len(audio_set):
        raise ContractViolation(f"matched pairs need equal sizes, got {len(text_set)} and {len(audio_set)}")
    a, b = text_set.vectors, audio_set.vectors
    centroid_distance = float(np.linalg.norm(a.mean(axis=0) - b.mean(axis=0)))
    norms = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    if np.any(norms == 0):
        raise ContractViolation("zero vector in a matched pair")
    cosines = np.sum(a * b, axis=1) / norms
    return GapStats(centroid_distance=centroid_distance, mean_pairwise_cosine=float(cosines.mean()))
