#!/usr/bin/env python3
"""
Experiment protocols over catalog models: singular models, 3-component ensembles,
training without rotation augmentation, and last-block ablation.
"""

import logging
from datetime import datetime
from typing import Dict, Any, List, Optional, Sequence

import pandas as pd

try:
    from .tensor import RngStream
    from .config import RunConfig
    from .data_processor import Dataset, augment_dataset
    from .errors import ConfigurationError
    from .model_spec import ModelSpec, catalog_ids
    from .models import build_model
    from .trainer import TrainConfig, train, evaluate
except ImportError:
    from tensor import RngStream
    from config import RunConfig
    from data_processor import Dataset, augment_dataset
    from errors import ConfigurationError
    from model_spec import ModelSpec, catalog_ids
    from models import build_model
    from trainer import TrainConfig, train, evaluate

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

PROTOCOLS = ('singular', 'ensemble', 'no_rotation', 'layer_ablation')
ENSEMBLE_SIZE = 3
RESULT_COLUMNS = ['model', 'protocol', 'accuracy', 'wing_loss', 'mae', 'mse', 'params', 'epochs', 'status']


def protocol_spec(model_id: str, kind: str, config: RunConfig) -> ModelSpec:
    """The catalog model under `kind`, sized by the run config's model keys."""
    values = dict(config.section('model'))
    values['id'] = model_id
    values['ensemble_k'] = ENSEMBLE_SIZE if kind == 'ensemble' else 1
    values['ablate'] = kind == 'layer_ablation'
    return ModelSpec.from_dict(values)


def run_protocol(kind: str, train_set: Dataset, val_set: Dataset, test_set: Optional[Dataset],
                 config: RunConfig, ids: Optional[Sequence[str]] = None,
                 rng: Optional[RngStream] = None) -> pd.DataFrame:
    """Train every listed catalog model under the protocol and evaluate it.

    `train_set` is un-augmented. Every protocol except 'no_rotation' trains on its
    rotation-augmented version; 'no_rotation' trains on the raw set for three times
    the epochs so the number of gradient steps matches.
    """
    if kind not in PROTOCOLS:
        raise ConfigurationError(f"Unknown protocol '{kind}', expected one of {list(PROTOCOLS)}")
    rng = rng or RngStream(config['train.seed'])
    ids = list(ids or catalog_ids())
    train_config = TrainConfig.from_run_config(config)
    if kind == 'no_rotation':
        fit_set = train_set
        train_config.epochs *= 3
    else:
        fit_set = augment_dataset(train_set, rng.split(0))
    scored_set = test_set if test_set is not None and len(test_set) else val_set

    rows: List[Dict[str, Any]] = []
    start_time = datetime.now()
    for index, model_id in enumerate(ids):
        spec = protocol_spec(model_id, kind, config)
        model = build_model(spec, fit_set.input_shape, rng=rng.split(index + 1))
        model, log = train(model, fit_set, val_set, train_config)
        report = evaluate(model, scored_set, train_config.batch_size, train_config.wing_w,
                          train_config.wing_eps, train_config.tau)
        rows.append({'model': model_id, 'protocol': kind, **{k: v for k, v in report.to_dict().items()
                                                              if k != 'n_samples'},
                     'params': model.param_count(), 'epochs': len(log.records), 'status': log.status})
        logger.info(f"{kind} {model_id}: accuracy {report.accuracy:.3f}, wing {report.wing_loss:.4f}")

    processing_time = (datetime.now() - start_time).total_seconds()
    logger.info(f"Protocol {kind} finished {len(rows)} models in {processing_time:.2f}s")
    return pd.DataFrame(rows, columns=RESULT_COLUMNS)
