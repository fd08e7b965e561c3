"""
Core numerics
Precision control, finite-value guards, finite-difference gradient checks,
AdamW with decoupled weight decay and the warmup + cosine learning-rate schedule.
Reverse-mode gradients come from torch autograd.
"""
import bisect
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .exceptions import ContractViolation, NumericalInstabilityError, TrainingDivergenceError
from .settings import warn_once

logger = logging.getLogger(__name__)

RELATIVE_ERROR_FLOOR = 1e-8


@contextmanager
def precision(dtype: torch.dtype = torch.float64) -> Iterator[None]:
    """Temporarily switch torch's default floating dtype"""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def ensure_finite(tensor: torch.Tensor, what: str, layer: Optional[int] = None) -> torch.Tensor:
    """Raise NumericalInstabilityError if tensor holds NaN/Inf"""
    if not torch.isfinite(tensor).all():
        where = f" (layer {layer})" if layer is not None else ""
        raise NumericalInstabilityError(f"non-finite values in {what}{where}", layer=layer)
    return tensor


class TrainSchedule(BaseModel):
    """AdamW hyper-parameters and the warmup/cosine learning-rate schedule"""

    model_config = ConfigDict(extra="forbid")

    base_lr: float = Field(1e-4, gt=0)
    warmup_steps: int = Field(1000, gt=0)
    total_steps: int = Field(5000, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    weight_decay: float = Field(1e-2, ge=0)
    eps: float = Field(1e-8, gt=0)

    @model_validator(mode="after")
    def _check_warmup(self) -> 'TrainSchedule':
        if self.warmup_steps >= self.total_steps:
            raise ValueError(f"warmup_steps ({self.warmup_steps}) must be < total_steps ({self.total_steps})")
        return self


def lr_at(schedule: TrainSchedule, step: int) -> float:
    """
    Learning rate at a given step

    Linear ramp from 0 to base_lr over [0, warmup_steps], then a half cosine
    down to 0 at total_steps. Steps past the end are clamped to 0.
    """
    if step < 0:
        raise ContractViolation(f"step must be non-negative, got {step}")
    if step > schedule.total_steps:
        warn_once(logger, "lr_clamp", f"step {step} is past total_steps={schedule.total_steps}; lr clamped to 0")
        return 0.0
    if step <= schedule.warmup_steps:
        return schedule.base_lr * step / schedule.warmup_steps
    progress = (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    """Adam moments for one parameter tensor"""
    first_moment: torch.Tensor
    second_moment: torch.Tensor
    step_count: int = 0

    @classmethod
    def zeros_like(cls, param: torch.Tensor) -> 'OptimizerState':
        return cls(torch.zeros_like(param), torch.zeros_like(param), 0)


def adamw_step(
    params: torch.Tensor,
    grads: torch.Tensor,
    state: OptimizerState,
    schedule: TrainSchedule,
    step: int,
) -> Tuple[torch.Tensor, OptimizerState]:
    """
    One decoupled-weight-decay Adam update with bias correction

    Args:
        params: Current parameter values
        grads: Gradient of the loss w.r.t. params
        state: Moments and update count for this parameter
        schedule: Hyper-parameters and lr schedule
        step: Schedule position used for the learning rate

    Returns:
        (updated params, updated state); inputs are not mutated
    """
    if params.shape != grads.shape or params.shape != state.first_moment.shape \
            or params.shape != state.second_moment.shape:
        raise ContractViolation(
            f"shape mismatch: params {tuple(params.shape)}, grads {tuple(grads.shape)}, "
            f"moments {tuple(state.first_moment.shape)}/{tuple(state.second_moment.shape)}"
        )
    if not torch.isfinite(grads).all():
        raise TrainingDivergenceError("non-finite gradients", step=step)

    lr = lr_at(schedule, step)
    beta1, beta2 = schedule.beta1, schedule.beta2
    count = state.step_count + 1

    first = beta1 * state.first_moment + (1.0 - beta1) * grads
    second = beta2 * state.second_moment + (1.0 - beta2) * grads * grads
    first_hat = first / (1.0 - beta1 ** count)
    second_hat = second / (1.0 - beta2 ** count)

    updated = params * (1.0 - lr * schedule.weight_decay) - lr * first_hat / (second_hat.sqrt() + schedule.eps)
    return updated, OptimizerState(first, second, count)


class ScheduledAdamW(torch.optim.Optimizer):
    """torch optimizer front-end that applies adamw_step to every parameter"""

    def __init__(self, params: Iterable[torch.nn.Parameter], schedule: TrainSchedule):
        super().__init__(params, defaults={})
        self.schedule = schedule
        self.step_count = 0

    @torch.no_grad()
    def step(self, closure: Optional[Callable[[], torch.Tensor]] = None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        self.step_count += 1
        for group in self.param_groups:
            for param in group['params']:
                if param.grad is None:
                    continue
                state = self.state[param].get('adamw')
                if state is None:
                    state = OptimizerState.zeros_like(param)
                updated, new_state = adamw_step(param, param.grad, state, self.schedule, self.step_count)
                param.copy_(updated)
                self.state[param]['adamw'] = new_state
        return loss

    @property
    def current_lr(self) -> float:
        return lr_at(self.schedule, min(self.step_count, self.schedule.total_steps))

    def named_moments(self, module: torch.nn.Module) -> Dict[str, torch.Tensor]:
        """Flatten moments into checkpoint-ready named tensors"""
        tensors: Dict[str, torch.Tensor] = {}
        for name, param in module.named_parameters():
            state = self.state.get(param, {}).get('adamw')
            if state is None:
                continue
            tensors[f"first_moment/{name}"] = state.first_moment
            tensors[f"second_moment/{name}"] = state.second_moment
        return tensors

    def load_named_moments(self, module: torch.nn.Module, tensors: Dict[str, torch.Tensor], step_count: int) -> None:
        self.step_count = step_count
        for name, param in module.named_parameters():
            key = f"first_moment/{name}"
            if key not in tensors:
                continue
            self.state[param]['adamw'] = OptimizerState(
                tensors[key].to(param.dtype).clone(),
                tensors[f"second_moment/{name}"].to(param.dtype).clone(),
                step_count,
            )


def grad_check(
    function: Callable[[torch.Tensor], torch.Tensor],
    point: torch.Tensor,
    epsilon: float = 1e-6,
    coordinates: Optional[Sequence[int]] = None,
) -> float:
    """
    Compare autograd against central differences

    Returns:
        max over checked coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    """
    if point.dtype != torch.float64:
        raise ContractViolation("grad_check requires a float64 point")
    if epsilon <= 0:
        raise ContractViolation("epsilon must be positive")

    x = point.detach().clone().requires_grad_(True)
    value = function(x)
    if value.numel() != 1:
        raise ContractViolation("grad_check needs a scalar function")
    if not torch.isfinite(value).all():
        raise NumericalInstabilityError("function is non-finite at the base point")
    (analytic,) = torch.autograd.grad(value, x, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x)
    analytic = analytic.detach().reshape(-1)

    base = point.detach().reshape(-1)
    indices = range(base.numel()) if coordinates is None else coordinates
    worst = 0.0
    with torch.no_grad():
        for index in indices:
            shifted = base.clone()
            shifted[index] += epsilon
            f_plus = function(shifted.view_as(point))
            shifted[index] -= 2 * epsilon
            f_minus = function(shifted.view_as(point))
            if not (torch.isfinite(f_plus).all() and torch.isfinite(f_minus).all()):
                raise NumericalInstabilityError(f"non-finite function value at coordinate {index}", coordinate=index)
            numeric = float((f_plus - f_minus) / (2 * epsilon))
            exact = float(analytic[index])
            denom = max(abs(exact), abs(numeric), RELATIVE_ERROR_FLOOR)
            worst = max(worst, abs(exact - numeric) / denom)
    return worst


def grad_check_parameters(
    loss_fn: Callable[[], torch.Tensor],
    parameters: Sequence[torch.nn.Parameter],
    epsilon: float = 1e-6,
    fraction: float = 1.0,
    generator: Optional[torch.Generator] = None,
    max_coordinates: Optional[int] = None,
) -> float:
    """
    grad_check over (a sampled fraction of) module parameters

    loss_fn must be deterministic: it is re-evaluated with each coordinate
    perturbed in place and restored afterwards.
    """
    params: List[torch.nn.Parameter] = [p for p in parameters if p.requires_grad]
    if any(p.dtype != torch.float64 for p in params):
        raise ContractViolation("grad_check_parameters requires float64 parameters")

    for p in params:
        p.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss).all():
        raise NumericalInstabilityError("loss is non-finite at the base point")
    grads = torch.autograd.grad(loss, params, allow_unused=True)

    sizes = [p.numel() for p in params]
    total = sum(sizes)
    count = max(1, int(round(total * fraction)))
    if max_coordinates is not None:
        count = min(count, max_coordinates)
    if count >= total:
        chosen = torch.arange(total)
    else:
        chosen = torch.randperm(total, generator=generator)[:count].sort().values

    offsets = [0]
    for size in sizes:
        offsets.append(offsets[-1] + size)
    worst = 0.0
    with torch.no_grad():
        for flat_index in chosen.tolist():
            which = bisect.bisect_right(offsets, flat_index) - 1
            local = flat_index - offsets[which]
            view = params[which].view(-1)
            original = float(view[local])
            view[local] = original + epsilon
            f_plus = float(loss_fn())
            view[local] = original - epsilon
            f_minus = float(loss_fn())
            view[local] = original
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NumericalInstabilityError(f"non-finite loss at coordinate {flat_index}", coordinate=flat_index)
            numeric = (f_plus - f_minus) / (2 * epsilon)
            grad = grads[which]
            exact = 0.0 if grad is None else float(grad.reshape(-1)[local])
            denom = max(abs(exact), abs(numeric), RELATIVE_ERROR_FLOOR)
            worst = max(worst, abs(exact - numeric) / denom)
    return worst
