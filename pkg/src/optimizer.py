"""Adam and the cosine-with-warmup-restarts learning-rate schedule."""
import math
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from .errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_LR = 1e-4


@dataclass
class OptimState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    base_lr: float = DEFAULT_LR
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"Adam betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.eps <= 0 or self.base_lr <= 0:
            raise ConfigError("Adam eps and base_lr must be positive")

    @classmethod
    def for_parameters(cls, named_params: Iterable[Tuple[str, np.ndarray]], **hyper) -> 'OptimState':
        state = cls(**hyper)
        for name, value in named_params:
            state.first_moment[name] = np.zeros_like(value)
            state.second_moment[name] = np.zeros_like(value)
        return state


def adam_step(state: OptimState, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              lr: Optional[float] = None) -> None:
    """Bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    lr = state.base_lr if lr is None else lr
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, grad in grads.items():
        if name not in params:
            raise ShapeError(f"gradient for unknown parameter {name}")
        param = params[name]
        if grad.shape != param.shape:
            raise ShapeError(f"gradient {name} has shape {grad.shape}, parameter has {param.shape}")
        m = state.first_moment.setdefault(name, np.zeros_like(param))
        v = state.second_moment.setdefault(name, np.zeros_like(param))
        if m.shape != param.shape:
            raise ShapeError(f"moment {name} has shape {m.shape}, parameter has {param.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        param -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype, copy=False)


@dataclass(frozen=True)
class LrSchedule:
    warmup_steps: int = 0
    cycle_length: int = 1
    cycle_mult: float = 1.0
    min_lr_fraction: float = 0.01

    def __post_init__(self):
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        if self.cycle_length < 1:
            raise ConfigError(f"cycle_length must be >= 1, got {self.cycle_length}")
        if self.cycle_mult < 1.0:
            raise ConfigError(f"cycle_mult must be >= 1, got {self.cycle_mult}")
        if not 0.0 <= self.min_lr_fraction < 1.0:
            raise ConfigError(f"min_lr_fraction must lie in [0, 1), got {self.min_lr_fraction}")

    @classmethod
    def for_stage(cls, total_steps: int, warmup_fraction: float = 0.05, cycle_mult: float = 1.0,
                  min_lr_fraction: float = 0.01, cycles: int = 1) -> 'LrSchedule':
        """Warmup over a fraction of the stage, then ``cycles`` equal cosine cycles."""
        warmup = int(total_steps * warmup_fraction)
        remaining = max(total_steps - warmup, 1)
        return cls(warmup, max(remaining // max(cycles, 1), 1), cycle_mult, min_lr_fraction)


def lr_at(schedule: LrSchedule, step: int, base_lr: float) -> float:
    """Linear warmup to base_lr, then cosine decay to the floor inside each restart cycle."""
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    if step < schedule.warmup_steps:
        return base_lr * step / schedule.warmup_steps
    position = step - schedule.warmup_steps
    length = float(schedule.cycle_length)
    while position >= length:
        position -= length
        length *= schedule.cycle_mult
    floor = schedule.min_lr_fraction * base_lr
    return floor + (base_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * position / length))
