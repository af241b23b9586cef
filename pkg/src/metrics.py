#!/usr/bin/env python3
"""
Landmark losses and evaluation metrics.
Wing loss drives training; accuracy, MAE and MSE describe an evaluation pass.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Any, Optional, Tuple

import numpy as np

try:
    from . import tensor as T
    from .tensor import Tensor
    from .errors import DimensionError, ConfigurationError
    from .config import Config
except ImportError:
    import tensor as T
    from tensor import Tensor
    from errors import DimensionError, ConfigurationError
    from config import Config

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


@dataclass
class MetricsReport:
    """Metrics for one evaluation pass over normalized coordinates."""
    accuracy: float
    wing_loss: float
    mae: float
    mse: float
    n_samples: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            'accuracy': float(self.accuracy),
            'wing_loss': float(self.wing_loss),
            'mae': float(self.mae),
            'mse': float(self.mse),
            'n_samples': int(self.n_samples)
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'MetricsReport':
        return cls(
            accuracy=float(data['accuracy']),
            wing_loss=float(data['wing_loss']),
            mae=float(data['mae']),
            mse=float(data['mse']),
            n_samples=int(data['n_samples'])
        )


def _pair(pred, target) -> Tuple[Tensor, Tensor]:
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return pred, target


def wing_constant(w: float, eps: float) -> float:
    """C = w - w·ln(1 + w/eps), making the two branches meet at |e| = w."""
    return w - w * math.log(1.0 + w / eps)


def wing_loss(pred, target, w: float = Config.WING_W, eps: float = Config.WING_EPS) -> Tensor:
    """Mean over the batch of the summed per-coordinate wing penalty."""
    if w <= 0 or eps <= 0:
        raise ConfigurationError(f"wing loss needs w > 0 and eps > 0, got w={w}, eps={eps}")
    pred, target = _pair(pred, target)
    batch = pred.shape[0] if pred.ndim == 3 else 1
    error = T.absolute(pred - target)
    small = T.log(error * (1.0 / eps) + 1.0) * w
    large = error - wing_constant(w, eps)
    per_coordinate = T.where(error.data < w, small, large)
    return T.reduce_sum(per_coordinate) * (1.0 / batch)


def mae(pred, target) -> Tensor:
    """Mean absolute error over all coordinates."""
    pred, target = _pair(pred, target)
    return T.reduce_mean(T.absolute(pred - target))


def mse(pred, target) -> Tensor:
    """Mean squared error over all coordinates."""
    pred, target = _pair(pred, target)
    error = pred - target
    return T.reduce_mean(error * error)


def wing_from_mae(mean_abs_error: float, n_coordinates: int = 12,
                  w: float = Config.WING_W, eps: float = Config.WING_EPS) -> float:
    """Wing loss implied by a homogeneous per-coordinate error equal to `mean_abs_error`."""
    return n_coordinates * w * math.log(1.0 + mean_abs_error / eps)


def accuracy(pred, target, tau: float = Config.ACCURACY_TAU,
             image_dims: Optional[Tuple[int, int]] = None) -> float:
    """Fraction of landmark points within tau × the ground-truth bounding-box diagonal.

    Coordinates are B×2×N (row 0 = x, row 1 = y). With image_dims (H, W) they are taken as
    normalized and scaled to pixels first. A degenerate box falls back to the image diagonal.
    """
    if tau <= 0:
        raise ConfigurationError(f"accuracy tau must be > 0, got {tau}")
    pred = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if pred.ndim == 2:
        pred, target = pred[None], target[None]
    if pred.size == 0:
        return 0.0

    if image_dims is not None:
        height, width = image_dims
        scale = np.array([width, height], dtype=np.float64).reshape(1, 2, 1)
        pred, target = pred * scale, target * scale
        image_diagonal = math.hypot(width, height)
    else:
        image_diagonal = math.sqrt(2.0)

    extent = target.max(axis=2) - target.min(axis=2)
    diagonal = np.hypot(extent[:, 0], extent[:, 1])
    degenerate = diagonal == 0
    if degenerate.any():
        logger.warning(f"{int(degenerate.sum())} samples have a degenerate landmark box, using image diagonal")
        diagonal = np.where(degenerate, image_diagonal, diagonal)

    distance = np.hypot(pred[:, 0] - target[:, 0], pred[:, 1] - target[:, 1])
    hits = distance <= tau * diagonal[:, None]
    return float(hits.mean())


def compute_metrics(pred, target, image_dims: Optional[Tuple[int, int]] = None,
                    w: float = Config.WING_W, eps: float = Config.WING_EPS,
                    tau: float = Config.ACCURACY_TAU) -> MetricsReport:
    """All four metrics for B×2×N normalized predictions."""
    pred, target = _pair(pred, target)
    with T.no_grad():
        return MetricsReport(
            accuracy=accuracy(pred, target, tau=tau, image_dims=image_dims),
            wing_loss=wing_loss(pred, target, w=w, eps=eps).item(),
            mae=mae(pred, target).item(),
            mse=mse(pred, target).item(),
            n_samples=pred.shape[0] if pred.ndim == 3 else 1
        )
