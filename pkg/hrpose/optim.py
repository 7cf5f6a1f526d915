"""
Adam optimizer and step-wise learning-rate schedules.
"""

import logging
from typing import Dict, List, Mapping, Optional, Tuple

import attrs
import numpy as np

from .config import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, LR_PRESETS
from .errors import ConfigError, ShapeError
from .tensor import Tensor


logger = logging.getLogger(__name__)


def _positive(instance, attribute, value):
    if value <= 0:
        raise ConfigError(f"{attribute.name} must be positive, got {value}")


@attrs.define
class AdamState:
    """
    Per-parameter moments and the shared step counter.

    Attributes:
        lr: Learning rate applied at the next step
        beta1, beta2, eps: Adam constants
        t: Number of steps taken so far
        m, v: First and second moments keyed by parameter name
    """

    lr: float = attrs.field(default=1e-3, validator=_positive)
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    t: int = 0
    m: Dict[str, np.ndarray] = attrs.field(factory=dict)
    v: Dict[str, np.ndarray] = attrs.field(factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Optional[np.ndarray]],
    state: AdamState
) -> AdamState:
    """
    Apply one bias-corrected Adam update in place.

    Parameters without a gradient are left untouched.

    Args:
        params: Parameter tensors keyed by name
        grads: Gradients keyed by the same names (None when absent)
        state: Optimizer state, updated in place

    Returns:
        The updated state
    """
    if state.lr <= 0:
        raise ConfigError(f"Adam learning rate must be positive, got {state.lr}")

    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t

    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if grad.shape != value.shape:
            raise ShapeError(f"Gradient for '{name}' has shape {grad.shape}, parameter has {value.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(value.data)
            state.v[name] = np.zeros_like(value.data)

        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad

        m_hat = m / correction1
        v_hat = v / correction2
        value.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(value.dtype)

    return state


@attrs.define(frozen=True)
class LrSchedule:
    """
    Piecewise-constant learning rate dropping at epoch milestones.

    Attributes:
        base_lr: Rate before the first milestone
        milestones: (epoch, lr) pairs; from `epoch` on the rate is `lr`
        total_epochs: Length of the schedule
    """

    base_lr: float = attrs.field(validator=_positive)
    milestones: Tuple[Tuple[int, float], ...] = attrs.field(
        converter=lambda pairs: tuple((int(e), float(lr)) for e, lr in pairs)
    )
    total_epochs: int = attrs.field(validator=_positive)

    @milestones.validator
    def _check_milestones(self, attribute, value):
        epochs = [epoch for epoch, _ in value]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ConfigError(f"Milestone epochs must be strictly increasing, got {epochs}")
        if epochs and (epochs[0] < 0 or epochs[-1] >= self.total_epochs):
            raise ConfigError(f"Milestone epochs must lie in [0, {self.total_epochs}), got {epochs}")

    @classmethod
    def preset(cls, name: str) -> "LrSchedule":
        if name not in LR_PRESETS:
            raise ConfigError(f"Unknown schedule preset '{name}', expected one of {sorted(LR_PRESETS)}")
        return cls(**LR_PRESETS[name])

    def lr_at(self, epoch: int) -> float:
        lr = self.base_lr
        for milestone, value in self.milestones:
            if epoch >= milestone:
                lr = value
        return lr

    def as_list(self) -> List[float]:
        return [self.lr_at(epoch) for epoch in range(self.total_epochs)]
