#!/usr/bin/env python3
"""
Activation maximization: gradient ascent on an input image so that a chosen
layer channel (or a whole layer) fires as strongly as possible.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

try:
    from . import tensor as T
    from .tensor import Tensor, RngStream
    from .config import Config, RunConfig
    from .errors import ConfigurationError, NumericError
except ImportError:
    import tensor as T
    from tensor import Tensor, RngStream
    from config import Config, RunConfig
    from errors import ConfigurationError, NumericError

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

STALL_STEPS = 5


@dataclass
class DreamConfig:
    """Target layer/channel and ascent settings. channel=None targets the whole layer."""
    layer: str
    channel: Optional[int] = 0
    steps: int = 50
    step_size: float = 0.05
    seed: int = Config.DEFAULT_SEED
    normalize_grad: bool = True

    def validate(self) -> List[str]:
        errors = []
        if self.steps < 1:
            errors.append(f"dream.steps must be >= 1, got {self.steps}")
        if not self.step_size > 0:
            errors.append(f"dream.step_size must be > 0, got {self.step_size}")
        if self.channel is not None and self.channel < 0:
            errors.append(f"dream.channel must be >= 0, got {self.channel}")
        return errors

    @classmethod
    def from_run_config(cls, config: RunConfig) -> 'DreamConfig':
        dream = config.section('dream')
        return cls(layer=dream['layer'], channel=dream['channel'] if dream['channel'] >= 0 else None,
                   steps=dream['steps'], step_size=dream['step_size'], seed=dream['seed'],
                   normalize_grad=dream['normalize_grad'])


@dataclass
class DreamResult:
    image: Tensor
    trace: List[float] = field(default_factory=list)
    status: str = 'completed'


def _objective(activation: Tensor, channel: Optional[int]) -> Tensor:
    if channel is None:
        return T.reduce_mean(activation)
    if channel >= activation.shape[-1]:
        raise ConfigurationError(f"channel {channel} out of range for layer with {activation.shape[-1]} channels")
    index = (slice(None),) * (activation.ndim - 1) + (channel,)
    return T.reduce_mean(activation[index])


def activation_maximize(model, cfg: DreamConfig) -> DreamResult:
    """Ascend x <- clip(x + step_size * g / (||g|| + 1e-8), 0, 1) from seeded noise in [0.4, 0.6].

    `model` needs `input_shape` and `activations(x, layer_name)`. The trace holds the
    objective before the first step and after every step; five consecutive zero
    gradients end the run early with status 'stalled'.
    """
    errors = cfg.validate()
    if errors:
        raise ConfigurationError("; ".join(errors))
    layer_names = getattr(model, 'layer_names', None)
    if callable(layer_names) and cfg.layer not in layer_names():
        raise ConfigurationError(f"Model has no layer '{cfg.layer}'")

    rng = RngStream(cfg.seed)
    image = rng.uniform(0.4, 0.6, tuple(model.input_shape))
    result = DreamResult(image=Tensor(image))
    zero_steps = 0

    for step in range(cfg.steps + 1):
        x = Tensor(image, requires_grad=True)
        objective = _objective(model.activations(x, cfg.layer), cfg.channel)
        result.trace.append(objective.item())
        if step == cfg.steps:
            break
        if not objective.is_leaf:
            objective.backward()
        grad = x.grad if x.grad is not None else np.zeros_like(image)
        if not np.isfinite(grad).all():
            raise NumericError(f"non-finite input gradient at step {step}")

        if not grad.any():
            zero_steps += 1
            if zero_steps >= STALL_STEPS:
                result.status = 'stalled'
                logger.warning(f"Dream on {cfg.layer}[{cfg.channel}] stalled after {step + 1} zero-gradient steps")
                break
            continue
        zero_steps = 0
        direction = grad / (np.linalg.norm(grad) + 1e-8) if cfg.normalize_grad else grad
        image = np.clip(image + cfg.step_size * direction, 0.0, 1.0)

    result.image = Tensor(image)
    if hasattr(model, 'zero_grad'):
        model.zero_grad()
    logger.info(f"Dream on {cfg.layer}[{'all' if cfg.channel is None else cfg.channel}]: "
                f"objective {result.trace[0]:.5f} -> {result.trace[-1]:.5f} ({result.status})")
    return result
