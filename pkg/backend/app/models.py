# app/models.py
"""
Shared domain types: latent sequences, conditioning bundles and embedding sets
"""
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np
import torch

from .exceptions import ContractViolation

AUDIO_SIDE = "audio-side"
TEXT_SIDE = "text-side"
MODALITIES = (AUDIO_SIDE, TEXT_SIDE)
REAL = "real"
GENERATED = "generated"
SOURCES = (REAL, GENERATED)


@dataclass
class LatentSequence:
    """A (length x channels) block of latent frames, the unit of generation"""
    frames: torch.Tensor

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ContractViolation(f"latent sequence must be (length>=1, channels), got {tuple(self.frames.shape)}")
        if not torch.isfinite(self.frames).all():
            raise ContractViolation("latent sequence contains non-finite values")

    @property
    def length(self) -> int:
        return int(self.frames.shape[0])

    @property
    def channels(self) -> int:
        return int(self.frames.shape[1])

    def window(self, start: int, size: int) -> 'LatentSequence':
        return LatentSequence(self.frames[start:start + size])

    @staticmethod
    def stack(sequences: List['LatentSequence']) -> torch.Tensor:
        """Batch equal-length sequences into a (batch, length, channels) tensor"""
        return torch.stack([s.frames for s in sequences], dim=0)


@dataclass
class ConditioningBundle:
    """
    Optional context latents and style embedding for a batch, plus the
    classifier-free dropout outcome per field. A dropped (or absent) field is
    replaced by the network's learned null token before the forward pass.
    """
    context: Optional[torch.Tensor] = None          # (batch, length, context_channels)
    style_embedding: Optional[torch.Tensor] = None  # (batch, style_dim)
    drop_context: Optional[torch.Tensor] = None     # (batch,) bool
    drop_style: Optional[torch.Tensor] = None       # (batch,) bool

    @property
    def dropped(self) -> Dict[str, Optional[torch.Tensor]]:
        return {'context': self.drop_context, 'style_embedding': self.drop_style}

    @property
    def batch_size(self) -> Optional[int]:
        for value in (self.context, self.style_embedding, self.drop_context, self.drop_style):
            if value is not None:
                return int(value.shape[0])
        return None

    def is_unconditional(self) -> bool:
        """True when every field is absent or dropped for the whole batch"""
        for value, mask in ((self.context, self.drop_context), (self.style_embedding, self.drop_style)):
            if value is None:
                continue
            if mask is None or not bool(mask.all()):
                return False
        return True

    def with_dropout(self, probability: float, generator: torch.Generator) -> 'ConditioningBundle':
        """Sample independent per-field dropout masks (present fields only)"""
        batch = self.batch_size
        if batch is None or probability <= 0.0:
            return self
        drop_context = None
        drop_style = None
        if self.context is not None:
            drop_context = torch.rand(batch, generator=generator) < probability
        if self.style_embedding is not None:
            drop_style = torch.rand(batch, generator=generator) < probability
        return replace(self, drop_context=drop_context, drop_style=drop_style)

    def unconditional(self) -> 'ConditioningBundle':
        """Same shapes with every field dropped (the CFG null branch)"""
        batch = self.batch_size
        if batch is None:
            return self
        drop_all = torch.ones(batch, dtype=torch.bool)
        return replace(
            self,
            drop_context=drop_all if self.context is not None else None,
            drop_style=drop_all if self.style_embedding is not None else None,
        )

    def to(self, dtype: torch.dtype) -> 'ConditioningBundle':
        return replace(
            self,
            context=None if self.context is None else self.context.to(dtype),
            style_embedding=None if self.style_embedding is None else self.style_embedding.to(dtype),
        )


@dataclass
class EmbeddingSet:
    """Fixed-dimension embeddings from one modality, with provenance"""
    vectors: np.ndarray
    modality: str = AUDIO_SIDE
    source: str = REAL

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ContractViolation(f"embedding set must be (N, D), got shape {self.vectors.shape}")
        if self.modality not in MODALITIES:
            raise ContractViolation(f"unknown modality tag: {self.modality}")
        if self.source not in SOURCES:
            raise ContractViolation(f"unknown source tag: {self.source}")
        if not np.isfinite(self.vectors).all():
            raise ContractViolation("embedding set contains non-finite entries")

    def __len__(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def subset(self, indices) -> 'EmbeddingSet':
        return EmbeddingSet(self.vectors[indices], self.modality, self.source)


@dataclass
class EmbeddingPair:
    """Matched text-side / audio-side unit embeddings with their tag provenance"""
    text_side: np.ndarray
    audio_side: np.ndarray
    tags: List[str] = field(default_factory=list)
