"""
Configuration settings for the thermal landmark toolkit.
Centralizes all configurable parameters for easy customization.
"""

import os
import logging
from pathlib import Path
from typing import Dict, Any, Optional, Tuple, Union

from dotenv import load_dotenv

try:
    from .errors import UsageError
except ImportError:
    from errors import UsageError

# Load environment variables
load_dotenv()

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


class Config:
    """Configuration class for the toolkit."""

    LOG_LEVEL = os.environ.get('LANDMARK_LOG_LEVEL', 'INFO')
    DEFAULT_SEED = int(os.environ.get('LANDMARK_SEED', 0))

    # Wing loss and accuracy
    WING_W = float(os.environ.get('LANDMARK_WING_W', 10.0))
    WING_EPS = float(os.environ.get('LANDMARK_WING_EPS', 2.0))
    ACCURACY_TAU = float(os.environ.get('LANDMARK_ACCURACY_TAU', 0.25))

    # Tree-structured Parzen estimator
    TPE_N_STARTUP = 10
    TPE_GAMMA = 0.25
    TPE_N_CANDIDATES = 24

    # Asynchronous successive halving
    ASHA_MIN_RESOURCE = 2
    ASHA_REDUCTION_FACTOR = 3

    # Input scales (H, W, C)
    INPUT_SCALES = {
        'full': (480, 640, 3),     # camera resolution
        'desk': (96, 128, 3),      # desktop experiments
        'tiny': (24, 32, 3)        # unit tests
    }

    # Per-scale defaults for the stem so attention stays affordable on one core
    SCALE_OVERRIDES = {
        'full': {},
        'desk': {'model.width': 16, 'model.stem_stride': 2},
        'tiny': {}
    }

    @classmethod
    def get_input_shape(cls, scale: str) -> Tuple[int, int, int]:
        """Get the input tensor shape for a named scale."""
        if scale not in cls.INPUT_SCALES:
            raise UsageError(f"Unknown scale '{scale}', expected one of {sorted(cls.INPUT_SCALES)}", key='scale')
        return cls.INPUT_SCALES[scale]

    @classmethod
    def get_scale_overrides(cls, scale: str) -> Dict[str, Any]:
        """Get run-config overrides that make a model fit the named scale."""
        cls.get_input_shape(scale)
        return dict(cls.SCALE_OVERRIDES[scale])


class DevelopmentConfig(Config):
    """Development environment configuration."""
    DEBUG = True


class ProductionConfig(Config):
    """Production environment configuration."""
    DEBUG = False


class TestingConfig(Config):
    """Testing environment configuration."""
    DEBUG = True
    LOG_LEVEL = 'WARNING'


def get_config(environment: str = None) -> Config:
    """Get configuration based on environment."""
    if environment is None:
        environment = os.environ.get('LANDMARK_ENV', 'development')

    configs = {
        'development': DevelopmentConfig,
        'production': ProductionConfig,
        'testing': TestingConfig
    }

    return configs.get(environment, DevelopmentConfig)


# Every key a run config may carry, with its default. Value types come from the defaults.
RUN_CONFIG_DEFAULTS: Dict[str, Any] = {
    'model.id': '',
    'model.stem': 'conv',
    'model.stem_depth': 3,
    'model.kernel_size': 3,
    'model.width': 64,
    'model.stem_stride': 1,
    'model.cardinality': 4,
    'model.branch': 'none',
    'model.branch_depth': 2,
    'model.patch_size': 2,
    'model.model_dim': 32,
    'model.heads': 4,
    'model.n_points': 6,
    'model.dropout': 0.1,
    'model.ensemble_k': 1,
    'model.ablate': False,
    'data.scale': 'desk',
    'data.val_fraction': 0.2,
    'data.test_fraction': 0.0,
    'data.augment': False,
    'train.epochs': 100,
    'train.batch_size': 32,
    'train.learning_rate': 1e-3,
    'train.beta1': 0.9,
    'train.beta2': 0.999,
    'train.eps': 1e-8,
    'train.seed': Config.DEFAULT_SEED,
    'train.eval_every': 1,
    'loss.wing_w': Config.WING_W,
    'loss.wing_eps': Config.WING_EPS,
    'metrics.tau': Config.ACCURACY_TAU,
    'search.trials': 40,
    'search.epochs': 20,
    'search.jobs': 1,
    'search.stem': 'conv|resnext|alt_conv_luong|alt_conv_bahdanau|alt_conv_resnext',
    'search.branch': 'none|luong|bahdanau|vit',
    'search.stem_depth': 'int:2:4',
    'search.branch_depth': 'int:1:3',
    'search.kernel_size': '3|5',
    'search.width': '8|16|32',
    'search.cardinality': '1|2|4',
    'search.heads': '1|2|4',
    'search.patch_size': '1|2|3',
    'search.dropout': 'float:0.0:0.5',
    'search.learning_rate': 'log:1e-4:1e-2',
    'dream.layer': 'stem.0',
    'dream.channel': 0,
    'dream.steps': 50,
    'dream.step_size': 0.05,
    'dream.seed': Config.DEFAULT_SEED,
    'dream.normalize_grad': True,
}


def _coerce(key: str, raw: Any, default: Any) -> Any:
    """Convert a raw config value to the type of its default."""
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ('true', '1', 'yes'):
            return True
        if text in ('false', '0', 'no'):
            return False
        raise UsageError(f"Config key '{key}' expects a boolean, got '{raw}'", key=key)
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except (TypeError, ValueError):
        raise UsageError(f"Config key '{key}' expects {type(default).__name__}, got '{raw}'", key=key)
    return str(raw).strip()


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str) -> Dict[str, str]:
    """Parse `key=value` lines into a raw dictionary."""
    values = {}
    for line_number, line in enumerate(text.splitlines(), start=1):
        stripped = line.split('#', 1)[0].strip()
        if not stripped:
            continue
        if '=' not in stripped:
            raise UsageError(f"Config line {line_number} is not 'key=value': '{line.strip()}'")
        key, value = stripped.split('=', 1)
        values[key.strip()] = value.strip()
    return values


class RunConfig:
    """Fully resolved run configuration with flat dotted keys."""

    def __init__(self, values: Optional[Dict[str, Any]] = None):
        self.values = dict(RUN_CONFIG_DEFAULTS)
        if values:
            self.update(values)

    def update(self, overrides: Dict[str, Any]) -> 'RunConfig':
        """Apply overrides in place; unknown keys are rejected."""
        for key, raw in overrides.items():
            if raw is None:
                continue
            if key not in RUN_CONFIG_DEFAULTS:
                raise UsageError(f"Unknown config key '{key}'", key=key)
            self.values[key] = _coerce(key, raw, RUN_CONFIG_DEFAULTS[key])
        return self

    @classmethod
    def from_file(cls, path: Union[str, Path, None],
                  overrides: Optional[Dict[str, Any]] = None) -> 'RunConfig':
        """Load a config file and apply flag overrides (flags win)."""
        config = cls()
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise UsageError(f"Config file not found: {path}", key='--config')
            config.update(parse_config_text(path.read_text(encoding='utf-8')))
            logger.info(f"Loaded run config from {path}")
        if overrides:
            config.update(overrides)
        return config

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def section(self, prefix: str) -> Dict[str, Any]:
        """Get the keys under `prefix.` with the prefix stripped."""
        head = prefix + '.'
        return {key[len(head):]: value for key, value in self.values.items() if key.startswith(head)}

    def to_text(self) -> str:
        return ''.join(f"{key}={_format_value(self.values[key])}\n" for key in sorted(self.values))

    def write(self, path: Union[str, Path]) -> Path:
        """Write the resolved config beside a run's outputs."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding='utf-8')
        return path
