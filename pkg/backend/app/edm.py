"""
EDM diffusion framework
Preconditioning, log-normal training noise, the weighted denoising loss, the
Karras sigma ladder and a deterministic Heun sampler with classifier-free guidance.
Works on any raw network with the signature network(x, c_noise, cond).
"""
import logging
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .dit import cfg_combine
from .exceptions import ContractViolation, TrainingDivergenceError
from .models import ConditioningBundle

logger = logging.getLogger(__name__)

Denoiser = Callable[[torch.Tensor, torch.Tensor, Optional[ConditioningBundle]], torch.Tensor]


class EDMParams(BaseModel):
    """Noise distribution and preconditioning constants"""

    model_config = ConfigDict(extra="forbid")

    sigma_min: float = Field(0.002, gt=0)
    sigma_max: float = Field(80.0, gt=0)
    sigma_data: float = Field(0.5, gt=0)
    rho: float = Field(7.0, gt=0)
    p_mean: float = -1.2
    p_std: float = Field(1.2, gt=0)

    @model_validator(mode="after")
    def _check_order(self) -> 'EDMParams':
        if not self.sigma_min < self.sigma_data < self.sigma_max:
            raise ValueError(
                f"expected sigma_min < sigma_data < sigma_max, got "
                f"{self.sigma_min}, {self.sigma_data}, {self.sigma_max}"
            )
        return self


@dataclass
class Preconditioning:
    c_skip: torch.Tensor
    c_out: torch.Tensor
    c_in: torch.Tensor
    c_noise: torch.Tensor


def _as_sigma(sigma: Union[float, torch.Tensor], dtype: Optional[torch.dtype] = None) -> torch.Tensor:
    value = torch.as_tensor(sigma, dtype=dtype or torch.get_default_dtype())
    if not value.is_floating_point():
        value = value.to(torch.get_default_dtype())
    if (value <= 0).any():
        raise ContractViolation(f"sigma must be positive, got min {float(value.min())}")
    return value


def precondition(sigma: Union[float, torch.Tensor], params: EDMParams) -> Preconditioning:
    """c_skip, c_out, c_in, c_noise for the given noise level(s)"""
    dtype = sigma.dtype if isinstance(sigma, torch.Tensor) and sigma.is_floating_point() else None
    sigma = _as_sigma(sigma, dtype)
    sd = params.sigma_data
    total = sigma ** 2 + sd ** 2
    return Preconditioning(
        c_skip=sd ** 2 / total,
        c_out=sigma * sd / total.sqrt(),
        c_in=1.0 / total.sqrt(),
        c_noise=sigma.log() / 4,
    )


def loss_weight(sigma: torch.Tensor, params: EDMParams) -> torch.Tensor:
    """lambda(sigma) = (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2"""
    sd = params.sigma_data
    return (sigma ** 2 + sd ** 2) / (sigma * sd) ** 2


def sample_training_sigma(
    generator: torch.Generator,
    params: EDMParams,
    size: Sequence[int] = (),
    dtype: Optional[torch.dtype] = None,
) -> torch.Tensor:
    """sigma = exp(P_mean + P_std * n), clamped to [sigma_min, sigma_max]"""
    n = torch.randn(tuple(size), generator=generator, dtype=dtype or torch.get_default_dtype())
    return (params.p_mean + params.p_std * n).exp().clamp(params.sigma_min, params.sigma_max)


def _broadcast(values: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return values.reshape(-1, *([1] * (like.ndim - 1)))


class EDMDenoiser(nn.Module):
    """
    D(x, sigma) = c_skip * x + c_out * F(c_in * x, c_noise)

    Counts network evaluations (one per forward, whatever the batch size).
    """

    def __init__(self, network: nn.Module, params: EDMParams):
        super().__init__()
        self.network = network
        self.params = params
        self.evaluations = 0

    def forward(self, x: torch.Tensor, sigma: Union[float, torch.Tensor],
                cond: Optional[ConditioningBundle] = None) -> torch.Tensor:
        sigma = _as_sigma(sigma, x.dtype).reshape(-1).expand(x.shape[0])
        pre = precondition(sigma, self.params)
        raw = self.network(_broadcast(pre.c_in, x) * x, pre.c_noise, cond)
        self.evaluations += 1
        return _broadcast(pre.c_skip, x) * x + _broadcast(pre.c_out, x) * raw


def denoise(model: Denoiser, noisy: torch.Tensor, sigma: Union[float, torch.Tensor],
            cond: Optional[ConditioningBundle] = None) -> torch.Tensor:
    """Denoised estimate x_hat of a noisy batch"""
    return model(noisy, sigma, cond)


def diffusion_loss(
    denoiser: EDMDenoiser,
    clean: torch.Tensor,
    cond: Optional[ConditioningBundle],
    generator: torch.Generator,
) -> torch.Tensor:
    """
    Weighted denoising loss, averaged over the batch

    Each example draws its own sigma and noise; the squared residual is averaged
    over the example's elements before weighting.
    """
    if not torch.isfinite(clean).all():
        raise ContractViolation("clean batch contains non-finite values")
    params = denoiser.params
    sigma = sample_training_sigma(generator, params, (clean.shape[0],), dtype=clean.dtype)
    noise = torch.randn(clean.shape, generator=generator, dtype=clean.dtype)
    noisy = clean + _broadcast(sigma, clean) * noise
    denoised = denoiser(noisy, sigma, cond)
    residual = (denoised - clean) ** 2
    per_example = loss_weight(sigma, params) * residual.reshape(clean.shape[0], -1).mean(dim=1)
    loss = per_example.mean()
    if not torch.isfinite(loss):
        raise TrainingDivergenceError("non-finite diffusion loss")
    return loss


def sigma_ladder(num_steps: int, params: EDMParams) -> torch.Tensor:
    """Karras-spaced decreasing noise levels (float64), endpoints exact"""
    if num_steps < 1:
        raise ContractViolation(f"num_steps must be >= 1, got {num_steps}")
    if num_steps == 1:
        return torch.tensor([params.sigma_max], dtype=torch.float64)
    inv_rho = 1.0 / params.rho
    ramp = torch.arange(num_steps, dtype=torch.float64) / (num_steps - 1)
    max_inv = params.sigma_max ** inv_rho
    min_inv = params.sigma_min ** inv_rho
    sigmas = (max_inv + ramp * (min_inv - max_inv)) ** params.rho
    sigmas[0] = params.sigma_max
    sigmas[-1] = params.sigma_min
    return sigmas


def _guidance_batch(cond: ConditioningBundle) -> ConditioningBundle:
    """Stack the conditional bundle on top of its fully dropped counterpart"""
    batch = cond.batch_size

    def _mask(value: Optional[torch.Tensor], mask: Optional[torch.Tensor]) -> Optional[torch.Tensor]:
        if value is None:
            return None
        keep = mask if mask is not None else torch.zeros(batch, dtype=torch.bool)
        return torch.cat([keep, torch.ones(batch, dtype=torch.bool)])

    def _double(value: Optional[torch.Tensor]) -> Optional[torch.Tensor]:
        return None if value is None else torch.cat([value, value])

    return replace(
        cond,
        context=_double(cond.context),
        style_embedding=_double(cond.style_embedding),
        drop_context=_mask(cond.context, cond.drop_context),
        drop_style=_mask(cond.style_embedding, cond.drop_style),
    )


def guided_denoise(
    denoiser: Denoiser,
    x: torch.Tensor,
    sigma: torch.Tensor,
    cond: Optional[ConditioningBundle],
    guidance_weight: float,
) -> torch.Tensor:
    """Denoised estimate with classifier-free guidance applied in x_hat space"""
    if cond is None or guidance_weight == 1.0 or cond.is_unconditional():
        return denoiser(x, sigma, cond)
    both = denoiser(torch.cat([x, x]), torch.cat([sigma, sigma]), _guidance_batch(cond))
    cond_out, uncond_out = both.chunk(2, dim=0)
    return cfg_combine(cond_out, uncond_out, guidance_weight)


def _model_dtype(denoiser: Denoiser) -> torch.dtype:
    if isinstance(denoiser, nn.Module):
        for param in denoiser.parameters():
            return param.dtype
    return torch.get_default_dtype()


@torch.no_grad()
def ode_sample(
    denoiser: Denoiser,
    cond: Optional[ConditioningBundle],
    shape: Tuple[int, ...],
    num_steps: int,
    guidance_weight: float,
    generator: torch.Generator,
    params: EDMParams,
) -> torch.Tensor:
    """
    Deterministic probability-flow sampling

    Starts at z * sigma_max and walks the sigma ladder (with 0 appended) using
    Heun steps; the final step to 0 is a plain Euler step, so it returns the
    denoised estimate at sigma_min. num_steps steps cost 2 * num_steps - 1
    (guided) denoiser evaluations.

    Args:
        denoiser: Callable (x, sigma, cond) -> x_hat
        cond: Conditioning for the whole batch, or None
        shape: Output shape, batch first
        num_steps: Number of noise levels on the ladder
        guidance_weight: CFG weight (1.0 disables guidance)
        generator: Seeded torch generator for the initial noise
        params: EDM constants

    Returns:
        Tensor of the requested shape
    """
    dtype = _model_dtype(denoiser)
    sigmas = torch.cat([sigma_ladder(num_steps, params), torch.zeros(1, dtype=torch.float64)])
    x = torch.randn(shape, generator=generator, dtype=dtype) * params.sigma_max
    batch = shape[0]

    for i in range(num_steps):
        s, s_next = float(sigmas[i]), float(sigmas[i + 1])
        denoised = guided_denoise(denoiser, x, torch.full((batch,), s, dtype=dtype), cond, guidance_weight)
        d = (x - denoised) / s
        x_next = x + (s_next - s) * d
        if s_next > 0:
            denoised_next = guided_denoise(
                denoiser, x_next, torch.full((batch,), s_next, dtype=dtype), cond, guidance_weight
            )
            d_next = (x_next - denoised_next) / s_next
            x_next = x + (s_next - s) * 0.5 * (d + d_next)
        if not torch.isfinite(x_next).all():
            raise TrainingDivergenceError(f"non-finite sampler state at step {i}", step=i)
        x = x_next
    return x


def heun_evaluations(num_steps: int) -> int:
    """Denoiser calls made by ode_sample for a ladder of num_steps levels"""
    return 2 * num_steps - 1
