#!/usr/bin/env python3
"""
Training, evaluation and checkpointing for landmark models.
Mini-batch Adam on wing loss with seeded shuffles, plus a float64 checkpoint format.
"""

import logging
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Callable, Dict, Any, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

try:
    from . import tensor as T
    from .tensor import Tensor, RngStream
    from .config import Config, RunConfig, parse_config_text
    from .data_processor import Dataset
    from .errors import ConfigurationError, CorruptCheckpointError, DimensionError
    from .metrics import MetricsReport, wing_loss, compute_metrics
    from .model_spec import ModelSpec
    from .models import BuiltModel, build_model
except ImportError:
    import tensor as T
    from tensor import Tensor, RngStream
    from config import Config, RunConfig, parse_config_text
    from data_processor import Dataset
    from errors import ConfigurationError, CorruptCheckpointError, DimensionError
    from metrics import MetricsReport, wing_loss, compute_metrics
    from model_spec import ModelSpec
    from models import BuiltModel, build_model

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

MANIFEST_FILE = 'manifest.tsv'
SPEC_FILE = 'model.spec'
BLOB_DTYPE = np.dtype('<f8')

EpochCallback = Callable[[int, 'EpochRecord'], bool]


@dataclass
class TrainConfig:
    """Training hyperparameters (Adam defaults, batch size 32)."""
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = Config.DEFAULT_SEED
    eval_every: int = 1
    wing_w: float = Config.WING_W
    wing_eps: float = Config.WING_EPS
    tau: float = Config.ACCURACY_TAU

    def validate(self) -> List[str]:
        errors = []
        if self.epochs < 1:
            errors.append(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            errors.append(f"train.batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate >= 0:
            errors.append(f"train.learning_rate must be >= 0, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            errors.append(f"train.beta1/beta2 must be in [0, 1), got {self.beta1}/{self.beta2}")
        if self.eval_every < 1:
            errors.append(f"train.eval_every must be >= 1, got {self.eval_every}")
        return errors

    @classmethod
    def from_run_config(cls, config: RunConfig) -> 'TrainConfig':
        train = config.section('train')
        return cls(
            epochs=train['epochs'],
            batch_size=train['batch_size'],
            learning_rate=train['learning_rate'],
            beta1=train['beta1'],
            beta2=train['beta2'],
            eps=train['eps'],
            seed=train['seed'],
            eval_every=train['eval_every'],
            wing_w=config['loss.wing_w'],
            wing_eps=config['loss.wing_eps'],
            tau=config['metrics.tau']
        )


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val: Optional[MetricsReport] = None

    def to_dict(self) -> Dict[str, Any]:
        row = {'epoch': self.epoch, 'train_wing_loss': self.train_loss}
        val = self.val.to_dict() if self.val else {k: float('nan') for k in ('accuracy', 'wing_loss', 'mae', 'mse')}
        for key in ('accuracy', 'wing_loss', 'mae', 'mse'):
            row[f'val_{key}'] = val[key]
        return row


@dataclass
class RunLog:
    """One record per completed epoch plus the run's final status."""
    records: List[EpochRecord] = field(default_factory=list)
    status: str = 'running'

    @property
    def train_losses(self) -> List[float]:
        return [r.train_loss for r in self.records]

    def last_val(self) -> Optional[MetricsReport]:
        for record in reversed(self.records):
            if record.val is not None:
                return record.val
        return None

    def to_frame(self) -> pd.DataFrame:
        columns = ['epoch', 'train_wing_loss', 'val_accuracy', 'val_wing_loss', 'val_mae', 'val_mse']
        return pd.DataFrame([r.to_dict() for r in self.records], columns=columns)


class Adam:
    """Adaptive moment estimation over a fixed list of leaf tensors."""

    def __init__(self, params: List[Tensor], learning_rate: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.first = [np.zeros_like(p.data) for p in params]
        self.second = [np.zeros_like(p.data) for p in params]

    def step(self):
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for param, first, second in zip(self.params, self.first, self.second):
            if param.grad is None:
                continue
            grad = param.grad
            first *= self.beta1
            first += (1.0 - self.beta1) * grad
            second *= self.beta2
            second += (1.0 - self.beta2) * grad * grad
            update = (first / correction1) / (np.sqrt(second / correction2) + self.eps)
            param.data -= self.learning_rate * update


def _check_data(model: BuiltModel, dataset: Dataset, role: str):
    if len(dataset) == 0:
        raise ConfigurationError(f"{role} dataset is empty")
    if tuple(dataset.input_shape) != tuple(model.input_shape):
        raise DimensionError(f"{role} images are {dataset.input_shape}, model expects {model.input_shape}")
    if dataset.n_points != model.spec.head.n_points:
        raise DimensionError(f"{role} samples have {dataset.n_points} points, model predicts "
                             f"{model.spec.head.n_points}")


def predict(model: BuiltModel, dataset: Dataset, batch_size: int = 32) -> np.ndarray:
    """Eval-mode predictions B×2×N for every sample, in dataset order."""
    outputs = []
    with T.no_grad():
        for start in range(0, len(dataset), batch_size):
            images, _ = dataset.arrays(range(start, min(start + batch_size, len(dataset))))
            outputs.append(model(Tensor(images), training=False).data)
    return np.concatenate(outputs, axis=0)


def evaluate(model: BuiltModel, dataset: Dataset, batch_size: int = 32,
             w: float = Config.WING_W, eps: float = Config.WING_EPS,
             tau: float = Config.ACCURACY_TAU) -> MetricsReport:
    """All four metrics on normalized coordinates, one eval-mode forward pass per sample."""
    _check_data(model, dataset, 'evaluation')
    predictions = predict(model, dataset, batch_size)
    _, targets = dataset.arrays()
    return compute_metrics(predictions, targets, image_dims=dataset.image_dims, w=w, eps=eps, tau=tau)


def train(model: BuiltModel, train_set: Dataset, val_set: Optional[Dataset], cfg: TrainConfig,
          epoch_callback: Optional[EpochCallback] = None) -> Tuple[BuiltModel, RunLog]:
    """Train in place and return (model, log).

    `epoch_callback(epoch, record)` runs after every epoch; returning False stops the run
    with status 'pruned'. A non-finite batch loss restores the weights from the last
    finished epoch and stops with status 'diverged'.
    """
    errors = cfg.validate()
    if errors:
        raise ConfigurationError("; ".join(errors))
    _check_data(model, train_set, 'training')
    if val_set is not None and len(val_set):
        _check_data(model, val_set, 'validation')

    start_time = datetime.now()
    rng = RngStream(cfg.seed)
    shuffle_rng, dropout_rng = rng.split(1), rng.split(2)
    params = [weight for _, weight in model.named_weights()]
    optimizer = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    log = RunLog()
    last_finite = model.state_dict()
    n = len(train_set)

    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        total = 0.0
        diverged = False
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            images, targets = train_set.arrays(batch)
            prediction = model(Tensor(images), training=True, rng=dropout_rng)
            loss = wing_loss(prediction, targets, w=cfg.wing_w, eps=cfg.wing_eps)
            if not math.isfinite(loss.item()):
                diverged = True
                break
            model.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(batch)

        if diverged or not all(np.isfinite(p.data).all() for p in params):
            model.load_state_dict(last_finite)
            log.status = 'diverged'
            logger.warning(f"Non-finite loss in epoch {epoch}; restored weights from epoch {epoch - 1}")
            break

        last_finite = model.state_dict()
        val_report = None
        if val_set is not None and len(val_set) and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            val_report = evaluate(model, val_set, cfg.batch_size, cfg.wing_w, cfg.wing_eps, cfg.tau)
        record = EpochRecord(epoch=epoch, train_loss=total / n, val=val_report)
        log.records.append(record)
        val_text = f", val wing {val_report.wing_loss:.4f}, val acc {val_report.accuracy:.3f}" if val_report else ""
        logger.info(f"Epoch {epoch}/{cfg.epochs}: train wing {record.train_loss:.4f}{val_text}")

        if epoch_callback is not None and epoch_callback(epoch, record) is False:
            log.status = 'pruned'
            break

    if log.status == 'running':
        log.status = 'completed'
    processing_time = (datetime.now() - start_time).total_seconds()
    logger.info(f"Training {log.status} after {len(log.records)} epochs in {processing_time:.2f}s")
    return model, log


# Checkpoints

def _spec_text(model: BuiltModel) -> str:
    values = dict(model.spec.to_dict())
    height, width, channels = model.input_shape
    values.update({'input.height': height, 'input.width': width, 'input.channels': channels})
    return ''.join(f"{key}={values[key]}\n" for key in sorted(values))


def save_checkpoint(model: BuiltModel, directory: Union[str, Path]) -> Path:
    """Write `manifest.tsv`, one little-endian float64 `<name>.bin` per tensor, and `model.spec`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, weight in model.named_weights():
        (directory / f"{name}.bin").write_bytes(weight.data.astype(BLOB_DTYPE).tobytes())
        rows.append({'name': name, 'dtype': 'float64', 'dims': 'x'.join(str(d) for d in weight.shape)})
    pd.DataFrame(rows, columns=['name', 'dtype', 'dims']).to_csv(directory / MANIFEST_FILE, sep='\t', index=False)
    (directory / SPEC_FILE).write_text(_spec_text(model), encoding='utf-8')
    logger.info(f"Saved checkpoint with {len(rows)} tensors to {directory}")
    return directory


def read_manifest(directory: Union[str, Path]) -> pd.DataFrame:
    path = Path(directory) / MANIFEST_FILE
    if not path.is_file():
        raise CorruptCheckpointError(f"missing {path}")
    manifest = pd.read_csv(path, sep='\t', dtype=str, keep_default_na=False)
    if list(manifest.columns) != ['name', 'dtype', 'dims']:
        raise CorruptCheckpointError(f"bad manifest header {list(manifest.columns)}")
    return manifest


def load_checkpoint(directory: Union[str, Path]) -> BuiltModel:
    """Rebuild the model from `model.spec` and fill it with the manifest's blobs."""
    directory = Path(directory)
    spec_path = directory / SPEC_FILE
    if not spec_path.is_file():
        raise CorruptCheckpointError(f"missing {spec_path}")
    values = parse_config_text(spec_path.read_text(encoding='utf-8'))
    try:
        input_shape = tuple(int(values.pop(f'input.{k}')) for k in ('height', 'width', 'channels'))
        spec = ModelSpec.from_dict(values)
    except (KeyError, ValueError) as e:
        raise CorruptCheckpointError(f"bad model spec in {spec_path}: {e}")
    model = build_model(spec, input_shape, rng=0)

    manifest = read_manifest(directory)
    expected = {name: weight for name, weight in model.named_weights()}
    if sorted(manifest['name']) != sorted(expected):
        raise CorruptCheckpointError(f"manifest tensors do not match model '{spec.name or spec.description}'")

    state = {}
    for row in manifest.itertuples(index=False):
        if row.dtype != 'float64':
            raise CorruptCheckpointError(f"tensor '{row.name}' has unsupported dtype {row.dtype}")
        dims = tuple(int(d) for d in row.dims.split('x')) if row.dims else ()
        if dims != expected[row.name].shape:
            raise CorruptCheckpointError(f"tensor '{row.name}' is {dims} in manifest, model needs "
                                         f"{expected[row.name].shape}")
        blob_path = directory / f"{row.name}.bin"
        if not blob_path.is_file():
            raise CorruptCheckpointError(f"missing blob {blob_path}")
        blob = blob_path.read_bytes()
        if len(blob) != int(np.prod(dims, dtype=np.int64)) * BLOB_DTYPE.itemsize:
            raise CorruptCheckpointError(f"blob {blob_path.name} has {len(blob)} bytes, manifest implies "
                                         f"{int(np.prod(dims, dtype=np.int64)) * BLOB_DTYPE.itemsize}")
        state[row.name] = np.frombuffer(blob, dtype=BLOB_DTYPE).reshape(dims).astype(np.float64)
    model.load_state_dict(state)
    logger.info(f"Loaded checkpoint {directory} ({len(state)} tensors)")
    return model
