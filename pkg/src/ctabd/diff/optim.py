"""Adam optimizer and learning-rate schedules."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from ..errors import ParameterError
from .tensor import DiffTensor


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ParameterError(f"betas must lie in (0, 1): {self.beta1}, {self.beta2}")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, values: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(values), np.zeros_like(values), 0)


def adam_step(values, grad, state: AdamState, config: AdamConfig, lr: float):
    """One bias-corrected Adam update; returns (new_values, state).

    ``state`` is updated in place (t increments, moments overwritten).
    """
    values = np.asarray(values)
    grad = np.asarray(grad)
    state.t += 1
    state.m = config.beta1 * state.m + (1.0 - config.beta1) * grad
    state.v = config.beta2 * state.v + (1.0 - config.beta2) * grad * grad
    m_hat = state.m / (1.0 - config.beta1 ** state.t)
    v_hat = state.v / (1.0 - config.beta2 ** state.t)
    new_values = values - lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return new_values.astype(values.dtype, copy=False), state


class AdamOptimizer:
    """Applies Adam in place over a fixed list of (name, DiffTensor) params."""

    def __init__(self, params, config: AdamConfig = AdamConfig()):
        self.config = config
        self.params: list[tuple[str, DiffTensor]] = list(params)
        self.state = {name: AdamState.zeros_like(p.data) for name, p in self.params}

    def step(self, lr: float):
        for name, p in self.params:
            if not p.has_grad:
                continue
            p.data, _ = adam_step(p.data, p.grad, self.state[name], self.config, lr)

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()


@dataclass(frozen=True)
class CosineAnnealing:
    """lr(t) = lr_min + (lr0 - lr_min) * (1 + cos(pi * t / total)) / 2."""

    lr0: float
    total_epochs: float
    lr_min: float = 0.0

    def __post_init__(self):
        if not self.lr0 > 0 or self.lr_min < 0 or not self.total_epochs > 0:
            raise ParameterError(f"invalid cosine schedule {self}")


@dataclass(frozen=True)
class StepDecay:
    """lr(e) = lr0 * factor ** floor(e / period_epochs)."""

    lr0: float
    factor: float
    period_epochs: int

    def __post_init__(self):
        if not self.lr0 > 0 or not (0.0 < self.factor < 1.0) or self.period_epochs < 1:
            raise ParameterError(f"invalid step-decay schedule {self}")


@dataclass(frozen=True)
class FixedLr:
    """Constant learning rate (used by the liver and prostate heads)."""

    lr0: float

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ParameterError(f"learning rate must be positive, got {self.lr0}")


LrSchedule = Union[CosineAnnealing, StepDecay, FixedLr]


def schedule_lr(schedule: LrSchedule, epoch: float, step: int = 0, steps_per_epoch: int | None = None) -> float:
    """Learning rate at a (possibly fractional) epoch.

    ``step``/``steps_per_epoch`` add a completed-step fraction on top of the
    completed epoch count.
    """
    if epoch < 0:
        raise ParameterError(f"epoch must be >= 0, got {epoch}")
    t = float(epoch)
    if steps_per_epoch:
        t += step / steps_per_epoch
    if isinstance(schedule, CosineAnnealing):
        frac = min(t, schedule.total_epochs) / schedule.total_epochs
        return schedule.lr_min + 0.5 * (schedule.lr0 - schedule.lr_min) * (1.0 + np.cos(np.pi * frac))
    if isinstance(schedule, StepDecay):
        return schedule.lr0 * schedule.factor ** int(t // schedule.period_epochs)
    if isinstance(schedule, FixedLr):
        return schedule.lr0
    raise ParameterError(f"unknown schedule {schedule!r}")
