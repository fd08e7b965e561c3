"""
Diffusion Transformer backbone
Patchified latent sequences, AdaLN-Zero blocks driven by the noise-level (+ style)
embedding, context latents prepended as extra tokens, and depthwise convolutions
after the Q, K, V projections.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .exceptions import ContractViolation, CorruptionError
from .models import ConditioningBundle, LatentSequence
from .numerics import ensure_finite

logger = logging.getLogger(__name__)


class DiTConfig(BaseModel):
    """Shape of the Diffusion Transformer"""

    model_config = ConfigDict(extra="forbid")

    model_dim: int = Field(64, gt=0)
    mlp_multiplier: int = Field(4, gt=0)
    num_heads: int = Field(2, gt=0)
    num_layers: int = Field(4, gt=0)
    patch_size: int = Field(2, gt=0)
    noise_embed_dim: int = Field(64, gt=0)
    latent_channels: int = Field(8, gt=0)
    context_channels: int = Field(8, ge=0)
    style_embed_dim: int = Field(64, ge=0)
    max_length: int = Field(64, gt=0)
    cond_dropout: float = Field(0.1, ge=0, le=1)
    conv_kernel: int = Field(3, gt=0)

    @model_validator(mode="after")
    def _check_shapes(self) -> 'DiTConfig':
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}")
        if self.noise_embed_dim % 2:
            raise ValueError("noise_embed_dim must be even")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")
        return self

    @property
    def max_tokens(self) -> int:
        return math.ceil(self.max_length / self.patch_size)

    @classmethod
    def full_scale(cls) -> 'DiTConfig':
        """1024-d, x4 MLP, 4 heads, 18 layers, 512-d noise embedding"""
        return cls(
            model_dim=1024, mlp_multiplier=4, num_heads=4, num_layers=18, patch_size=2,
            noise_embed_dim=512, latent_channels=64, context_channels=64, style_embed_dim=512,
            max_length=256,
        )


def sinusoidal_embed(value: Union[float, torch.Tensor], dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """
    Interleaved (sin, cos) features at geometrically spaced frequencies

    Args:
        value: Scalar or tensor of shape (N,)
        dim: Even output width
        max_period: Period of the slowest frequency

    Returns:
        Tensor of shape (dim,) or (N, dim)
    """
    if dim <= 0 or dim % 2:
        raise ContractViolation(f"sinusoidal embedding dim must be even and positive, got {dim}")
    values = torch.as_tensor(value, dtype=torch.get_default_dtype())
    if not values.is_floating_point():
        values = values.to(torch.get_default_dtype())
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=values.dtype) / half)
    args = values[..., None] * freqs
    return torch.stack([torch.sin(args), torch.cos(args)], dim=-1).reshape(*args.shape[:-1], dim)


@dataclass
class PatchTokens:
    """Token view of a latent sequence and the bookkeeping to invert it"""
    tokens: torch.Tensor   # (..., num_tokens, patch_size * channels)
    length: int
    patch_size: int
    channels: int


def patchify(seq: Union[LatentSequence, torch.Tensor], patch_size: int) -> PatchTokens:
    """Zero-pad the time axis to a multiple of patch_size and fold frames into tokens"""
    frames = seq.frames if isinstance(seq, LatentSequence) else seq
    if patch_size < 1:
        raise ContractViolation("patch_size must be positive")
    length, channels = int(frames.shape[-2]), int(frames.shape[-1])
    pad = (-length) % patch_size
    if pad:
        frames = F.pad(frames, (0, 0, 0, pad))
    tokens = rearrange(frames, '... (t p) c -> ... t (p c)', p=patch_size)
    return PatchTokens(tokens=tokens, length=length, patch_size=patch_size, channels=channels)


def unpatchify(patched: PatchTokens) -> torch.Tensor:
    """Inverse of patchify; padding frames are stripped"""
    tokens = patched.tokens
    expected_tokens = math.ceil(patched.length / patched.patch_size)
    if tokens.shape[-2] != expected_tokens or tokens.shape[-1] != patched.patch_size * patched.channels:
        raise CorruptionError(
            f"token tensor {tuple(tokens.shape)} is inconsistent with length {patched.length}, "
            f"patch {patched.patch_size}, channels {patched.channels}"
        )
    frames = rearrange(tokens, '... t (p c) -> ... (t p) c', p=patched.patch_size)
    return frames[..., :patched.length, :]


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


def cfg_combine(cond_out: torch.Tensor, uncond_out: torch.Tensor, weight: float) -> torch.Tensor:
    """Classifier-free guidance: uncond + weight * (cond - uncond)"""
    if cond_out.shape != uncond_out.shape:
        raise ContractViolation(f"guidance shapes differ: {tuple(cond_out.shape)} vs {tuple(uncond_out.shape)}")
    if weight == 1.0:
        return cond_out.clone()
    if weight == 0.0:
        return uncond_out.clone()
    return uncond_out + weight * (cond_out - uncond_out)


class NoiseLevelEmbedder(nn.Module):
    """Sinusoidal features of c_noise followed by a two-layer MLP"""

    def __init__(self, embed_dim: int):
        super().__init__()
        self.embed_dim = embed_dim
        self.mlp = nn.Sequential(
            nn.Linear(embed_dim, embed_dim),
            nn.SiLU(),
            nn.Linear(embed_dim, embed_dim),
        )

    def forward(self, c_noise: torch.Tensor) -> torch.Tensor:
        features = sinusoidal_embed(c_noise, self.embed_dim).to(self.mlp[0].weight.dtype)
        return self.mlp(features)


class DWConvSelfAttention(nn.Module):
    """
    Multi-head full self-attention with a per-channel 1-D depthwise convolution
    (zero padded) applied to each of Q, K and V after the input projection.
    Kernels start as the delta kernel, so at init this is standard attention.
    """

    def __init__(self, dim: int, num_heads: int, kernel_size: int = 3):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.q_conv = nn.Conv1d(dim, dim, kernel_size, padding=kernel_size // 2, groups=dim)
        self.k_conv = nn.Conv1d(dim, dim, kernel_size, padding=kernel_size // 2, groups=dim)
        self.v_conv = nn.Conv1d(dim, dim, kernel_size, padding=kernel_size // 2, groups=dim)
        self.proj = nn.Linear(dim, dim)
        self.reset_convolutions()

    def reset_convolutions(self) -> None:
        with torch.no_grad():
            for conv in (self.q_conv, self.k_conv, self.v_conv):
                conv.weight.zero_()
                conv.weight[:, 0, conv.kernel_size[0] // 2] = 1.0
                conv.bias.zero_()

    @staticmethod
    def _along_tokens(conv: nn.Conv1d, x: torch.Tensor) -> torch.Tensor:
        return conv(x.transpose(1, 2)).transpose(1, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] == 0:
            raise ContractViolation("attention over an empty token sequence")
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = self._along_tokens(self.q_conv, q)
        k = self._along_tokens(self.k_conv, k)
        v = self._along_tokens(self.v_conv, v)
        q, k, v = (rearrange(t, 'b t (h d) -> b h t d', h=self.num_heads) for t in (q, k, v))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        out = scores.softmax(dim=-1) @ v
        return self.proj(rearrange(out, 'b h t d -> b t (h d)'))


@dataclass
class AdaLNOutput:
    """Per-branch (scale, shift, gate) and the block output they produced"""
    modulation: Dict[str, Tuple[torch.Tensor, torch.Tensor, torch.Tensor]]
    output: torch.Tensor


class DiTBlock(nn.Module):
    """A transformer block with adaptive layer norm zero (adaLN-Zero) conditioning"""

    def __init__(self, dim: int, cond_dim: int, num_heads: int, mlp_multiplier: int = 4, kernel_size: int = 3):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = DWConvSelfAttention(dim, num_heads, kernel_size)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_multiplier * dim),
            nn.GELU(approximate="tanh"),
            nn.Linear(mlp_multiplier * dim, dim),
        )
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(cond_dim, 6 * dim))

    def adaln_modulate(self, hidden: torch.Tensor, cond_embed: torch.Tensor) -> AdaLNOutput:
        """output = hidden + gate * Branch(LayerNorm(hidden) * (1 + scale) + shift), per branch"""
        shift_msa, scale_msa, gate_msa, shift_mlp, scale_mlp, gate_mlp = \
            self.adaLN_modulation(cond_embed).chunk(6, dim=-1)
        x = hidden + gate_msa.unsqueeze(1) * self.attn(modulate(self.norm1(hidden), shift_msa, scale_msa))
        x = x + gate_mlp.unsqueeze(1) * self.mlp(modulate(self.norm2(x), shift_mlp, scale_mlp))
        return AdaLNOutput(
            modulation={
                'attention': (scale_msa, shift_msa, gate_msa),
                'mlp': (scale_mlp, shift_mlp, gate_mlp),
            },
            output=x,
        )

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        return self.adaln_modulate(x, c).output


class FinalLayer(nn.Module):
    """AdaLN (shift, scale) and the linear head back to patch features"""

    def __init__(self, dim: int, cond_dim: int, out_features: int):
        super().__init__()
        self.norm_final = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.linear = nn.Linear(dim, out_features)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(cond_dim, 2 * dim))

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        shift, scale = self.adaLN_modulation(c).chunk(2, dim=-1)
        return self.linear(modulate(self.norm_final(x), shift, scale))


class DiffusionTransformer(nn.Module):
    """
    The raw network F_theta

    forward(x, c_noise, cond) maps a (batch, length, latent_channels) input and
    per-example c_noise values to an output of the same shape as x. Callers apply
    EDM or consistency preconditioning around it.
    """

    def __init__(self, config: DiTConfig):
        super().__init__()
        self.config = config
        dim, cond_dim, p = config.model_dim, config.noise_embed_dim, config.patch_size

        self.x_embedder = nn.Linear(p * config.latent_channels, dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, config.max_tokens, dim))
        self.noise_embedder = NoiseLevelEmbedder(cond_dim)

        self.context_embedder = None
        if config.context_channels > 0:
            self.context_embedder = nn.Linear(p * config.context_channels, dim)
            self.context_pos_embed = nn.Parameter(torch.zeros(1, config.max_tokens, dim))
            self.null_context = nn.Parameter(torch.zeros(1, 1, dim))

        self.style_embedder = None
        if config.style_embed_dim > 0:
            self.style_embedder = nn.Linear(config.style_embed_dim, cond_dim)
            self.null_style = nn.Parameter(torch.zeros(cond_dim))

        self.blocks = nn.ModuleList([
            DiTBlock(dim, cond_dim, config.num_heads, config.mlp_multiplier, config.conv_kernel)
            for _ in range(config.num_layers)
        ])
        self.final_layer = FinalLayer(dim, cond_dim, p * config.latent_channels)
        self.initialize_weights()

    def initialize_weights(self) -> None:
        def _basic_init(module):
            if isinstance(module, nn.Linear):
                torch.nn.init.xavier_uniform_(module.weight)
                if module.bias is not None:
                    nn.init.constant_(module.bias, 0)
        self.apply(_basic_init)
        for block in self.blocks:
            block.attn.reset_convolutions()

        nn.init.normal_(self.pos_embed, std=0.02)
        if self.context_embedder is not None:
            nn.init.normal_(self.context_pos_embed, std=0.02)
            nn.init.normal_(self.null_context, std=0.02)
        if self.style_embedder is not None:
            nn.init.normal_(self.null_style, std=0.02)

        nn.init.normal_(self.noise_embedder.mlp[0].weight, std=0.02)
        nn.init.normal_(self.noise_embedder.mlp[2].weight, std=0.02)

        # Zero-out adaLN modulation layers in DiT blocks:
        for block in self.blocks:
            nn.init.constant_(block.adaLN_modulation[-1].weight, 0)
            nn.init.constant_(block.adaLN_modulation[-1].bias, 0)

        # Zero-out output layers:
        nn.init.constant_(self.final_layer.adaLN_modulation[-1].weight, 0)
        nn.init.constant_(self.final_layer.adaLN_modulation[-1].bias, 0)
        nn.init.constant_(self.final_layer.linear.weight, 0)
        nn.init.constant_(self.final_layer.linear.bias, 0)

    def _style_embedding(self, cond: Optional[ConditioningBundle], batch: int) -> Optional[torch.Tensor]:
        if self.style_embedder is None:
            return None
        null = self.null_style.expand(batch, -1)
        if cond is None or cond.style_embedding is None:
            return null
        embedded = self.style_embedder(cond.style_embedding.to(self.null_style.dtype))
        if cond.drop_style is None:
            return embedded
        return torch.where(cond.drop_style.unsqueeze(-1), null, embedded)

    def _context_tokens(self, cond: Optional[ConditioningBundle], batch: int, num_tokens: int) -> Optional[torch.Tensor]:
        if self.context_embedder is None:
            return None
        if cond is None or cond.context is None:
            null = self.null_context.expand(batch, num_tokens, -1)
            return null + self.context_pos_embed[:, :num_tokens]
        patched = patchify(cond.context.to(self.null_context.dtype), self.config.patch_size)
        count = patched.tokens.shape[1]
        if count > self.config.max_tokens:
            raise ContractViolation(f"context of {patched.length} frames exceeds max_length {self.config.max_length}")
        tokens = self.context_embedder(patched.tokens)
        if cond.drop_context is not None:
            tokens = torch.where(cond.drop_context.view(-1, 1, 1), self.null_context.expand_as(tokens), tokens)
        return tokens + self.context_pos_embed[:, :count]

    def forward(self, x: torch.Tensor, c_noise: torch.Tensor, cond: Optional[ConditioningBundle] = None) -> torch.Tensor:
        """
        Forward pass of DiT

        Args:
            x: (B, L, latent_channels) preconditioned noisy latents
            c_noise: (B,) noise-level inputs (log(sigma) / 4)
            cond: Optional conditioning bundle; dropped or absent fields use null tokens

        Returns:
            (B, L, latent_channels) raw network output
        """
        if x.ndim != 3 or x.shape[-1] != self.config.latent_channels:
            raise ContractViolation(f"expected (B, L, {self.config.latent_channels}) input, got {tuple(x.shape)}")
        batch = x.shape[0]
        patched = patchify(x, self.config.patch_size)
        num_tokens = patched.tokens.shape[1]
        if num_tokens > self.config.max_tokens:
            raise ContractViolation(f"sequence of {patched.length} frames exceeds max_length {self.config.max_length}")

        h = self.x_embedder(patched.tokens) + self.pos_embed[:, :num_tokens]
        c = self.noise_embedder(c_noise.reshape(-1).expand(batch))
        style = self._style_embedding(cond, batch)
        if style is not None:
            c = c + style

        context = self._context_tokens(cond, batch, num_tokens)
        offset = 0
        if context is not None:
            offset = context.shape[1]
            h = torch.cat([context, h], dim=1)

        for index, block in enumerate(self.blocks):
            h = ensure_finite(block(h, c), "DiT block output", layer=index)

        out = self.final_layer(h[:, offset:], c)
        out = ensure_finite(out, "DiT final layer", layer=len(self.blocks))
        return unpatchify(PatchTokens(out, patched.length, patched.patch_size, patched.channels))


def count_parameters(config: DiTConfig) -> int:
    """Parameter count of a DiT built from config, without allocating weights"""
    with torch.device("meta"):
        model = DiffusionTransformer(config)
    return sum(p.numel() for p in model.parameters())
