"""
Consistency training on the DiT backbone
Boundary-respecting parameterization, the adjacent-noise-level loss against a
stop-gradient teacher snapshot, the exponential consistency-gap schedule and
one-step / multistep sampling.
"""
import copy
import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .edm import EDMParams, sigma_ladder
from .exceptions import ContractViolation, TrainingDivergenceError
from .models import ConditioningBundle
from .settings import warn_once

logger = logging.getLogger(__name__)

HUBER_SCALE = 0.00054
MAX_SIGMA_RESAMPLES = 8


class ConsistencySchedule(BaseModel):
    """Exponentially shrinking gap between adjacent log-sigma levels"""

    model_config = ConfigDict(extra="forbid")

    gap_max: float = Field(2.0, gt=0)
    gap_min: float = Field(1e-4, gt=0)
    total_steps: int = Field(5000, gt=0)

    @model_validator(mode="after")
    def _check_gaps(self) -> 'ConsistencySchedule':
        if self.gap_min >= self.gap_max:
            raise ValueError(f"gap_min ({self.gap_min}) must be < gap_max ({self.gap_max})")
        return self


class ConsistencyLossSpec(BaseModel):
    """Pseudo-Huber distance; huber_c=None means 0.00054 * sqrt(data dimensionality)"""

    model_config = ConfigDict(extra="forbid")

    huber_c: Optional[float] = Field(None, gt=0)

    def distance_constant(self, dim: int) -> float:
        if self.huber_c is not None:
            return self.huber_c
        return HUBER_SCALE * math.sqrt(dim)

    @staticmethod
    def weighting(sigma_i: torch.Tensor, sigma_next: torch.Tensor) -> torch.Tensor:
        """lambda = 1 / (sigma_{i+1} - sigma_i)"""
        return 1.0 / (sigma_next - sigma_i)


def gap_at(schedule: ConsistencySchedule, step: int) -> float:
    """gap(k) = gap_max * (gap_min / gap_max) ** (k / total_steps), k clamped to the schedule"""
    k = min(max(step, 0), schedule.total_steps)
    return schedule.gap_max * (schedule.gap_min / schedule.gap_max) ** (k / schedule.total_steps)


def boundary_scalings(sigma: torch.Tensor, params: EDMParams) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """c_skip, c_out, c_in with c_skip(sigma_min) = 1 and c_out(sigma_min) = 0"""
    sd = params.sigma_data
    shifted = sigma - params.sigma_min
    c_skip = sd ** 2 / (shifted ** 2 + sd ** 2)
    c_out = sd * shifted / (sigma ** 2 + sd ** 2).sqrt()
    c_in = 1.0 / (sigma ** 2 + sd ** 2).sqrt()
    return c_skip, c_out, c_in


def _sigma_column(sigma: Union[float, torch.Tensor], like: torch.Tensor) -> torch.Tensor:
    values = torch.as_tensor(sigma, dtype=like.dtype).reshape(-1).expand(like.shape[0])
    return values


def _broadcast(values: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return values.reshape(-1, *([1] * (like.ndim - 1)))


def consistency_fn(
    raw_output: torch.Tensor,
    noisy: torch.Tensor,
    sigma: Union[float, torch.Tensor],
    params: EDMParams,
) -> torch.Tensor:
    """f(x, sigma) = c_skip(sigma) * x + c_out(sigma) * F"""
    sigma = _sigma_column(sigma, noisy)
    if (sigma < params.sigma_min).any():
        raise ContractViolation(f"sigma {float(sigma.min())} is below sigma_min {params.sigma_min}")
    c_skip, c_out, _ = boundary_scalings(sigma, params)
    return _broadcast(c_skip, noisy) * noisy + _broadcast(c_out, noisy) * raw_output


class ConsistencyModel(nn.Module):
    """A raw network (DiT) under the boundary-respecting parameterization"""

    def __init__(self, network: nn.Module, params: EDMParams):
        super().__init__()
        self.network = network
        self.params = params
        self.evaluations = 0

    def forward(self, x: torch.Tensor, sigma: Union[float, torch.Tensor],
                cond: Optional[ConditioningBundle] = None) -> torch.Tensor:
        sigma = _sigma_column(sigma, x)
        if (sigma < self.params.sigma_min).any():
            raise ContractViolation(f"sigma {float(sigma.min())} is below sigma_min {self.params.sigma_min}")
        _, _, c_in = boundary_scalings(sigma, self.params)
        raw = self.network(_broadcast(c_in, x) * x, sigma.log() / 4, cond)
        self.evaluations += 1
        return consistency_fn(raw, x, sigma, self.params)


@dataclass
class TeacherState:
    """Frozen parameter snapshot of the student; evaluated without gradients"""
    model: ConsistencyModel

    @classmethod
    def snapshot(cls, student: ConsistencyModel) -> 'TeacherState':
        teacher = copy.deepcopy(student)
        for param in teacher.parameters():
            param.requires_grad_(False)
        return cls(model=teacher)

    @torch.no_grad()
    def refresh(self, student: ConsistencyModel) -> None:
        for target, source in zip(self.model.parameters(), student.parameters()):
            target.copy_(source)

    def __call__(self, x: torch.Tensor, sigma: torch.Tensor, cond: Optional[ConditioningBundle]) -> torch.Tensor:
        with torch.no_grad():
            return self.model(x, sigma, cond)


def pseudo_huber(a: torch.Tensor, b: torch.Tensor, c: float) -> torch.Tensor:
    """Per-example sqrt(||a - b||^2 + c^2) - c"""
    squared = ((a - b) ** 2).reshape(a.shape[0], -1).sum(dim=1)
    return torch.sqrt(squared + c ** 2) - c


def sample_adjacent_sigmas(
    generator: torch.Generator,
    params: EDMParams,
    gap: float,
    batch: int,
    dtype: torch.dtype,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Continuous (sigma_i, sigma_{i+1}) pairs with log sigma_{i+1} - log sigma_i = gap

    sigma_{i+1} is log-normal; draws that would push sigma_i below sigma_min are
    redrawn a few times, then clamped to [sigma_min * e^gap, sigma_max].
    """
    lower = params.sigma_min * math.exp(gap)
    if lower >= params.sigma_max:
        raise ContractViolation(f"gap {gap} leaves no room between sigma_min and sigma_max")

    def draw(size: int) -> torch.Tensor:
        n = torch.randn(size, generator=generator, dtype=dtype)
        return (params.p_mean + params.p_std * n).exp()

    sigma_next = draw(batch)
    for _ in range(MAX_SIGMA_RESAMPLES):
        low = sigma_next < lower
        if not bool(low.any()):
            break
        warn_once(logger, "consistency_resample", f"resampling noise levels below sigma_min * e^gap ({lower:.4g})")
        sigma_next = torch.where(low, draw(batch), sigma_next)
    sigma_next = sigma_next.clamp(lower, params.sigma_max)
    sigma_i = sigma_next * math.exp(-gap)
    return sigma_i, sigma_next


def consistency_loss(
    student: ConsistencyModel,
    teacher: TeacherState,
    clean: torch.Tensor,
    cond: Optional[ConditioningBundle],
    step: int,
    schedule: ConsistencySchedule,
    generator: torch.Generator,
    loss_spec: Optional[ConsistencyLossSpec] = None,
) -> torch.Tensor:
    """
    lambda(sigma_i, sigma_{i+1}) * d(f_student(x_{sigma_{i+1}}), f_teacher(x_{sigma_i}))

    Both noisy inputs share one noise realization. The teacher must already be
    refreshed to the student's current weights.
    """
    loss_spec = loss_spec or ConsistencyLossSpec()
    params = student.params
    gap = gap_at(schedule, step)
    sigma_i, sigma_next = sample_adjacent_sigmas(generator, params, gap, clean.shape[0], clean.dtype)
    noise = torch.randn(clean.shape, generator=generator, dtype=clean.dtype)

    student_out = student(clean + _broadcast(sigma_next, clean) * noise, sigma_next, cond)
    teacher_out = teacher(clean + _broadcast(sigma_i, clean) * noise, sigma_i, cond)

    c = loss_spec.distance_constant(clean[0].numel())
    distance = pseudo_huber(student_out, teacher_out.detach(), c)
    loss = (loss_spec.weighting(sigma_i, sigma_next) * distance).mean()
    if not torch.isfinite(loss):
        raise TrainingDivergenceError(f"non-finite consistency loss at step {step}", step=step)
    return loss


@torch.no_grad()
def one_step_sample(
    model: ConsistencyModel,
    cond: Optional[ConditioningBundle],
    shape: Tuple[int, ...],
    generator: torch.Generator,
) -> torch.Tensor:
    """x = f(z, sigma_max) with z ~ N(0, sigma_max^2 I)"""
    dtype = next(model.parameters()).dtype
    sigma_max = model.params.sigma_max
    z = torch.randn(shape, generator=generator, dtype=dtype) * sigma_max
    return model(z, sigma_max, cond)


@torch.no_grad()
def multistep_sample(
    model: ConsistencyModel,
    cond: Optional[ConditioningBundle],
    shape: Tuple[int, ...],
    generator: torch.Generator,
    num_steps: int = 5,
) -> torch.Tensor:
    """
    Alternate consistency applications and re-noising down sigma_ladder(num_steps + 1)

    Costs exactly num_steps network evaluations; num_steps=1 is one_step_sample.
    """
    if num_steps < 1:
        raise ContractViolation(f"num_steps must be >= 1, got {num_steps}")
    params = model.params
    dtype = next(model.parameters()).dtype
    sigmas = sigma_ladder(num_steps + 1, params).tolist()
    x = torch.randn(shape, generator=generator, dtype=dtype) * sigmas[0]
    for j in range(num_steps):
        x = model(x, sigmas[j], cond)
        if j < num_steps - 1:
            scale = math.sqrt(sigmas[j + 1] ** 2 - params.sigma_min ** 2)
            x = x + scale * torch.randn(shape, generator=generator, dtype=dtype)
    return x
