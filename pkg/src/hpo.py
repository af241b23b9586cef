#!/usr/bin/env python3
"""
Hyperparameter search over model specs.
A univariate Tree-structured Parzen Estimator proposes parameters and
Asynchronous Successive Halving prunes trials at geometric rung epochs.
"""

import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Dict, Any, List, Optional, Sequence, Tuple, Union, Callable

import numpy as np
import pandas as pd
from scipy.special import ndtr

try:
    from .tensor import RngStream
    from .config import Config, RunConfig
    from .data_processor import Dataset
    from .errors import ConfigurationError, ContractError, DimensionError, LandmarkError, UsageError
    from .model_spec import ModelSpec
    from .models import BuiltModel, build_model
    from .trainer import TrainConfig, train
except ImportError:
    from tensor import RngStream
    from config import Config, RunConfig
    from data_processor import Dataset
    from errors import ConfigurationError, ContractError, DimensionError, LandmarkError, UsageError
    from model_spec import ModelSpec
    from models import BuiltModel, build_model
    from trainer import TrainConfig, train

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

STUDY_FILE = 'study.tsv'
TRIALS_FILE = 'trials.tsv'
SEARCH_SETTINGS = ('trials', 'epochs', 'jobs')


class DimensionKind(Enum):
    UNIFORM = "float"
    LOG_UNIFORM = "log"
    INTEGER = "int"
    CATEGORICAL = "categorical"


def _parse_choice(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


@dataclass(frozen=True)
class Dimension:
    """One searchable hyperparameter."""
    name: str
    kind: DimensionKind
    low: Optional[float] = None
    high: Optional[float] = None
    choices: Tuple[Any, ...] = ()

    def __post_init__(self):
        if self.kind == DimensionKind.CATEGORICAL:
            if not self.choices:
                raise ConfigurationError(f"search dimension '{self.name}' has no choices")
        elif not (self.low is not None and self.high is not None and self.low < self.high):
            raise ConfigurationError(f"search dimension '{self.name}' needs low < high, got {self.low}, {self.high}")
        elif self.kind == DimensionKind.LOG_UNIFORM and self.low <= 0:
            raise ConfigurationError(f"log-uniform dimension '{self.name}' needs low > 0, got {self.low}")

    @classmethod
    def parse(cls, name: str, text: str) -> 'Dimension':
        """'int:2:4', 'float:0:0.5', 'log:1e-4:1e-2', or 'a|b|c' for categorical choices."""
        head, _, rest = text.partition(':')
        if head in ('int', 'float', 'log') and rest:
            try:
                low, high = (float(v) for v in rest.split(':'))
            except ValueError:
                raise UsageError(f"Bad bounds '{text}' for search.{name}", key=f"search.{name}")
            kind = {'int': DimensionKind.INTEGER, 'float': DimensionKind.UNIFORM,
                    'log': DimensionKind.LOG_UNIFORM}[head]
            if kind == DimensionKind.INTEGER:
                low, high = int(low), int(high)
            return cls(name, kind, low, high)
        choices = tuple(_parse_choice(c.strip()) for c in text.split('|') if c.strip())
        return cls(name, DimensionKind.CATEGORICAL, choices=choices)

    def to_internal(self, value) -> float:
        """Map a value into the space the Parzen estimator works in."""
        return math.log(value) if self.kind == DimensionKind.LOG_UNIFORM else float(value)

    def from_internal(self, value: float):
        if self.kind == DimensionKind.LOG_UNIFORM:
            return float(math.exp(value))
        if self.kind == DimensionKind.INTEGER:
            return int(round(value))
        return float(value)

    @property
    def bounds(self) -> Tuple[float, float]:
        """Internal-space bounds; integers get half a step on each side."""
        if self.kind == DimensionKind.INTEGER:
            return self.low - 0.5, self.high + 0.5
        return self.to_internal(self.low), self.to_internal(self.high)

    def sample_prior(self, rng: RngStream):
        if self.kind == DimensionKind.CATEGORICAL:
            return self.choices[int(rng.integers(0, len(self.choices)))]
        if self.kind == DimensionKind.INTEGER:
            return int(rng.integers(self.low, self.high + 1))
        low, high = self.bounds
        return self.from_internal(rng.uniform(low, high))


def uniform(name: str, low: float, high: float) -> Dimension:
    return Dimension(name, DimensionKind.UNIFORM, low, high)


def log_uniform(name: str, low: float, high: float) -> Dimension:
    return Dimension(name, DimensionKind.LOG_UNIFORM, low, high)


def integer(name: str, low: int, high: int) -> Dimension:
    return Dimension(name, DimensionKind.INTEGER, low, high)


def categorical(name: str, choices: Sequence[Any]) -> Dimension:
    return Dimension(name, DimensionKind.CATEGORICAL, choices=tuple(choices))


class SearchSpace:
    """Ordered named dimensions."""

    def __init__(self, dimensions: Sequence[Dimension]):
        self.dimensions: Dict[str, Dimension] = {}
        for dimension in dimensions:
            if dimension.name in self.dimensions:
                raise ConfigurationError(f"duplicate search dimension '{dimension.name}'")
            self.dimensions[dimension.name] = dimension

    def __iter__(self):
        return iter(self.dimensions.values())

    def __len__(self) -> int:
        return len(self.dimensions)

    def names(self) -> List[str]:
        return list(self.dimensions)

    @classmethod
    def from_config(cls, config: RunConfig) -> 'SearchSpace':
        """Every `search.*` key other than trials/epochs/jobs is a dimension."""
        return cls([Dimension.parse(name, str(text)) for name, text in config.section('search').items()
                    if name not in SEARCH_SETTINGS and str(text).strip()])

    @staticmethod
    def config_key(name: str) -> str:
        return 'train.learning_rate' if name == 'learning_rate' else f'model.{name}'

    def apply(self, params: Dict[str, Any], base: RunConfig) -> RunConfig:
        """A copy of `base` with the trial's parameters written into it."""
        config = RunConfig(dict(base.values))
        overrides = {self.config_key(name): value for name, value in params.items()}
        if any(key in overrides for key in ('model.stem', 'model.branch')):
            overrides['model.id'] = ''
        return config.update(overrides)


@dataclass
class Trial:
    """One sampled configuration and its per-epoch objective history."""
    id: int
    params: Dict[str, Any]
    history: List[float] = field(default_factory=list)
    status: str = 'running'

    @property
    def objective(self) -> float:
        if self.status == 'failed' or not self.history:
            return math.inf
        return self.history[-1]


class Study:
    """Trials, rung snapshots and the best-model slot; all mutation under one lock."""

    def __init__(self, space: SearchSpace, max_epochs: int,
                 min_resource: int = Config.ASHA_MIN_RESOURCE,
                 reduction_factor: int = Config.ASHA_REDUCTION_FACTOR):
        if max_epochs < 1:
            raise ConfigurationError(f"max epochs must be >= 1, got {max_epochs}")
        self.space = space
        self.max_epochs = max_epochs
        self.reduction_factor = reduction_factor
        self.rungs = asha_rungs(max_epochs, min_resource, reduction_factor)
        self.trials: List[Trial] = []
        self.reports: List[Tuple[int, int, float]] = []
        self.rung_reports: Dict[int, List[Tuple[int, float]]] = {rung: [] for rung in self.rungs}
        self.best_model: Optional[BuiltModel] = None
        self.lock = threading.RLock()

    def new_trial(self, params: Dict[str, Any]) -> Trial:
        with self.lock:
            trial = Trial(id=len(self.trials), params=dict(params))
            self.trials.append(trial)
            return trial

    def get_trial(self, trial_id: int) -> Trial:
        return self.trials[trial_id]

    def report(self, trial: Trial, epoch: int, value: float):
        """Record the objective for `epoch`; epochs arrive in order starting at 1."""
        with self.lock:
            if trial.status in ('pruned', 'failed'):
                raise ContractError(f"trial {trial.id} is {trial.status} and cannot report")
            if epoch != len(trial.history) + 1 or epoch > self.max_epochs:
                raise ContractError(f"trial {trial.id} reported epoch {epoch} after {len(trial.history)} epochs")
            trial.history.append(float(value))
            self.reports.append((trial.id, epoch, float(value)))
            if epoch in self.rung_reports:
                self.rung_reports[epoch].append((trial.id, float(value)))

    def finished(self) -> List[Trial]:
        """Trials the sampler learns from: complete ones plus failures scored +inf."""
        with self.lock:
            return [t for t in self.trials if t.status in ('complete', 'failed')]

    def completed(self) -> List[Trial]:
        with self.lock:
            return [t for t in self.trials if t.status == 'complete']

    def best(self) -> Optional[Trial]:
        complete = self.completed()
        if not complete:
            return None
        return min(complete, key=lambda t: (t.objective, t.id))

    def counts(self) -> Dict[str, int]:
        with self.lock:
            statuses = [t.status for t in self.trials]
        return {status: statuses.count(status) for status in ('running', 'pruned', 'complete', 'failed')}

    # Persistence

    def to_frames(self) -> Tuple[pd.DataFrame, pd.DataFrame]:
        with self.lock:
            reports = pd.DataFrame(self.reports, columns=['trial', 'epoch', 'wing_loss'])
            names = self.space.names()
            rows = [[t.id, t.status, t.objective, len(t.history)] + [t.params.get(n) for n in names]
                    for t in self.trials]
            trials = pd.DataFrame(rows, columns=['trial', 'status', 'objective', 'epochs'] + names)
        return reports, trials

    def save(self, directory: Union[str, Path]) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        reports, trials = self.to_frames()
        reports.to_csv(directory / STUDY_FILE, sep='\t', index=False)
        trials.to_csv(directory / TRIALS_FILE, sep='\t', index=False)
        return directory

    @classmethod
    def load(cls, directory: Union[str, Path], space: SearchSpace, max_epochs: int) -> 'Study':
        """Rebuild a study by replaying its report log; interrupted trials are marked failed."""
        directory = Path(directory)
        study = cls(space, max_epochs)
        trials = pd.read_csv(directory / TRIALS_FILE, sep='\t', keep_default_na=False)
        reports = pd.read_csv(directory / STUDY_FILE, sep='\t')
        for row in trials.to_dict('records'):
            params = {}
            for dimension in space:
                raw = row[dimension.name]
                if dimension.kind == DimensionKind.CATEGORICAL:
                    params[dimension.name] = _parse_choice(str(raw))
                elif dimension.kind == DimensionKind.INTEGER:
                    params[dimension.name] = int(raw)
                else:
                    params[dimension.name] = float(raw)
            study.new_trial(params)
        for row in reports.itertuples(index=False):
            study.report(study.trials[int(row.trial)], int(row.epoch), float(row.wing_loss))
        for trial, status in zip(study.trials, trials['status']):
            trial.status = status
            if status == 'running':
                logger.warning(f"Trial {trial.id} was interrupted; marking it failed")
                trial.status = 'failed'
        logger.info(f"Resumed study from {directory}: {len(study.trials)} trials, {len(study.reports)} reports")
        return study


# ASHA

def asha_rungs(max_epochs: int, min_resource: int = Config.ASHA_MIN_RESOURCE,
               reduction_factor: int = Config.ASHA_REDUCTION_FACTOR) -> List[int]:
    """Rung epochs r·η^k strictly below max_epochs (2, 6, 18 for 20 epochs)."""
    rungs, rung = [], min_resource
    while rung < max_epochs:
        rungs.append(rung)
        rung *= reduction_factor
    return rungs


def asha_decide(study: Study, trial: Trial, epoch: int) -> str:
    """'continue' or 'prune' for `trial` after reporting `epoch`.

    At a rung, only the reports that arrived up to and including this trial's are
    considered; the trial continues iff it ranks within the top floor(k / η) of them,
    ties going to the lower trial id. The first report at a rung has no peers to be
    ranked against and continues.
    """
    with study.lock:
        if epoch not in study.rung_reports:
            return 'continue'
        reports = study.rung_reports[epoch]
        position = next((i for i, (trial_id, _) in enumerate(reports) if trial_id == trial.id), None)
        if position is None:
            raise ContractError(f"trial {trial.id} has no report at rung {epoch}")
        snapshot = reports[:position + 1]
    if len(snapshot) == 1:
        return 'continue'
    promoted = len(snapshot) // study.reduction_factor
    ranked = sorted(snapshot, key=lambda report: (report[1], report[0]))
    rank = next(i for i, (trial_id, _) in enumerate(ranked) if trial_id == trial.id)
    return 'continue' if rank < promoted else 'prune'


# TPE

class ParzenEstimator:
    """1-D Gaussian mixture over internal-space observations plus one prior component."""

    def __init__(self, observations: Sequence[float], low: float, high: float):
        self.low, self.high = low, high
        span = high - low
        mus = np.append(np.asarray(observations, dtype=np.float64), (low + high) / 2.0)
        order = np.argsort(mus, kind='stable')
        ordered = mus[order]
        left = np.diff(np.concatenate([[low], ordered]))
        right = np.diff(np.concatenate([ordered, [high]]))
        sigmas = np.empty_like(mus)
        sigmas[order] = np.maximum(left, right)
        sigmas[-1] = span
        minimum = span / min(100.0, 1.0 + len(observations))
        self.mus = mus
        self.sigmas = np.clip(sigmas, minimum, span)
        self.weights = np.full(len(mus), 1.0 / len(mus))

    def sample(self, rng: RngStream, size: int) -> np.ndarray:
        components = np.searchsorted(np.cumsum(self.weights), rng.uniform(0.0, 1.0, size), side='right')
        components = np.minimum(components, len(self.mus) - 1)
        draws = rng.normal(self.mus[components], self.sigmas[components])
        return np.clip(draws, self.low, self.high)

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)[:, None]
        z = (x - self.mus) / self.sigmas
        mass = ndtr((self.high - self.mus) / self.sigmas) - ndtr((self.low - self.mus) / self.sigmas)
        density = np.exp(-0.5 * z * z) / (self.sigmas * math.sqrt(2.0 * math.pi) * np.maximum(mass, 1e-12))
        return np.log(np.maximum((density * self.weights).sum(axis=1), 1e-300))


def _categorical_probabilities(dimension: Dimension, values: Sequence[Any]) -> np.ndarray:
    counts = np.ones(len(dimension.choices))
    for value in values:
        if value in dimension.choices:
            counts[dimension.choices.index(value)] += 1
    return counts / counts.sum()


def _suggest_dimension(dimension: Dimension, good: Sequence[Any], bad: Sequence[Any],
                       rng: RngStream, n_candidates: int):
    if dimension.kind == DimensionKind.CATEGORICAL:
        p_good = _categorical_probabilities(dimension, good)
        p_bad = _categorical_probabilities(dimension, bad)
        candidates = np.searchsorted(np.cumsum(p_good), rng.uniform(0.0, 1.0, n_candidates), side='right')
        candidates = np.minimum(candidates, len(dimension.choices) - 1)
        scores = np.log(p_good[candidates]) - np.log(p_bad[candidates])
        return dimension.choices[int(candidates[int(np.argmax(scores))])]

    low, high = dimension.bounds
    l_model = ParzenEstimator([dimension.to_internal(v) for v in good], low, high)
    g_model = ParzenEstimator([dimension.to_internal(v) for v in bad], low, high)
    candidates = l_model.sample(rng, n_candidates)
    if dimension.kind == DimensionKind.INTEGER:
        candidates = np.clip(np.rint(candidates), dimension.low, dimension.high)
    scores = l_model.log_pdf(candidates) - g_model.log_pdf(candidates)
    return dimension.from_internal(candidates[int(np.argmax(scores))])


def tpe_suggest(study: Study, rng: RngStream, n_startup: int = Config.TPE_N_STARTUP,
                gamma: float = Config.TPE_GAMMA, n_candidates: int = Config.TPE_N_CANDIDATES) -> Dict[str, Any]:
    """Prior samples until n_startup trials complete, then per-dimension argmax of l(x)/g(x)."""
    if len(study.completed()) < n_startup:
        return {dimension.name: dimension.sample_prior(rng) for dimension in study.space}

    finished = sorted(study.finished(), key=lambda t: (t.objective, t.id))
    n_good = max(1, int(math.ceil(gamma * len(finished))))
    good, bad = finished[:n_good], finished[n_good:]
    return {
        dimension.name: _suggest_dimension(dimension, [t.params[dimension.name] for t in good],
                                           [t.params[dimension.name] for t in bad], rng, n_candidates)
        for dimension in study.space
    }


# Study driver

def _run_trial(study: Study, trial: Trial, base: RunConfig, epochs: int,
               train_set: Dataset, val_set: Dataset, rng: RngStream):
    config = study.space.apply(trial.params, base)
    try:
        spec = ModelSpec.from_dict(config.section('model'))
        model = build_model(spec, train_set.input_shape, rng=rng.split(1))
    except (ConfigurationError, DimensionError, UsageError) as e:
        with study.lock:
            trial.status = 'failed'
        logger.warning(f"Trial {trial.id} failed to build, scoring +inf: {e}")
        return

    train_config = TrainConfig.from_run_config(config)
    train_config.epochs = epochs
    train_config.eval_every = 1
    train_config.seed = train_config.seed + trial.id

    def on_epoch(epoch, record) -> bool:
        study.report(trial, epoch, record.val.wing_loss)
        return asha_decide(study, trial, epoch) == 'continue'

    try:
        model, log = train(model, train_set, val_set, train_config, epoch_callback=on_epoch)
    except LandmarkError as e:
        with study.lock:
            trial.status = 'failed'
        logger.warning(f"Trial {trial.id} failed during training, scoring +inf: {e}")
        return

    with study.lock:
        trial.status = {'completed': 'complete', 'pruned': 'pruned'}.get(log.status, 'failed')
        best = study.best()
        if trial.status == 'complete' and best is trial:
            study.best_model = model
    logger.info(f"Trial {trial.id} {trial.status} after {len(trial.history)} epochs, "
                f"objective {trial.objective:.4f}")


def run_study(space: SearchSpace, budget_trials: int, epochs_per_trial: int,
              train_set: Dataset, val_set: Dataset, rng: RngStream,
              base_config: Optional[RunConfig] = None, jobs: int = 1,
              study: Optional[Study] = None,
              on_trial_end: Optional[Callable[[Study, Trial], None]] = None) -> Study:
    """Suggest, build, train with ASHA callbacks and record until `budget_trials` trials exist."""
    if budget_trials < 1:
        raise ConfigurationError(f"trial budget must be >= 1, got {budget_trials}")
    if jobs < 1:
        raise ConfigurationError(f"jobs must be >= 1, got {jobs}")
    if val_set is None or len(val_set) == 0:
        raise ConfigurationError("search needs a nonempty validation set")
    base = base_config or RunConfig()
    study = study or Study(space, epochs_per_trial)
    start_time = datetime.now()

    def work(_slot: int):
        with study.lock:
            trial_id = len(study.trials)
            trial_rng = rng.split(trial_id)
            trial = study.new_trial(tpe_suggest(study, trial_rng.split(0)))
        logger.info(f"Trial {trial.id} params: {trial.params}")
        _run_trial(study, trial, base, epochs_per_trial, train_set, val_set, trial_rng)
        if on_trial_end is not None:
            with study.lock:
                on_trial_end(study, trial)

    remaining = budget_trials - len(study.trials)
    if jobs == 1:
        for slot in range(remaining):
            work(slot)
    else:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            list(executor.map(work, range(remaining)))

    counts = study.counts()
    best = study.best()
    processing_time = (datetime.now() - start_time).total_seconds()
    logger.info(f"Study finished in {processing_time:.2f}s: {counts}, "
                f"best {'none' if best is None else f'trial {best.id} ({best.objective:.4f})'}")
    return study
