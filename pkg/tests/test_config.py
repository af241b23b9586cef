"""
Tests for configuration settings and run configs.
"""

import pytest
import tempfile
from pathlib import Path
import sys

# Add the src directory to the Python path for testing
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from config import Config, RunConfig, RUN_CONFIG_DEFAULTS, parse_config_text, get_config
from errors import UsageError


class TestConfig:
    """Test static settings."""

    def test_loss_defaults(self):
        """Test the wing loss and accuracy constants."""
        assert (Config.WING_W, Config.WING_EPS, Config.ACCURACY_TAU) == (10.0, 2.0, 0.25)

    def test_input_scales(self):
        """Test named input shapes."""
        assert Config.get_input_shape('tiny') == (24, 32, 3)
        assert Config.get_input_shape('full') == (480, 640, 3)
        with pytest.raises(UsageError):
            Config.get_input_shape('huge')

    def test_scale_overrides_are_copies(self):
        """Test that callers cannot mutate the per-scale overrides."""
        overrides = Config.get_scale_overrides('desk')
        overrides['model.width'] = 1
        assert Config.get_scale_overrides('desk')['model.width'] == 16

    def test_get_config(self):
        """Test environment selection."""
        assert get_config('testing').LOG_LEVEL == 'WARNING'
        assert get_config('unknown').DEBUG is True


class TestRunConfig:
    """Test run config parsing, typing and layering."""

    def test_defaults(self):
        """Test that a fresh config holds every default."""
        config = RunConfig()
        assert config.values == RUN_CONFIG_DEFAULTS
        assert config['train.batch_size'] == 32

    def test_values_take_default_types(self):
        """Test string values coerced to int, float and bool."""
        config = RunConfig({'train.epochs': '5', 'train.learning_rate': '0.01', 'data.augment': 'true'})
        assert config['train.epochs'] == 5
        assert config['train.learning_rate'] == 0.01
        assert config['data.augment'] is True

    def test_unknown_key(self):
        """Test that unknown keys are usage errors naming the key."""
        with pytest.raises(UsageError) as excinfo:
            RunConfig({'train.epoch': 5})
        assert excinfo.value.key == 'train.epoch'

    def test_bad_value(self):
        """Test that an unparsable value is a usage error."""
        with pytest.raises(UsageError):
            RunConfig({'train.epochs': 'many'})

    def test_parse_text(self):
        """Test key=value lines with comments and blanks."""
        values = parse_config_text("# run\n\nmodel.id = A-3\ntrain.epochs=4  # short\n")
        assert values == {'model.id': 'A-3', 'train.epochs': '4'}
        with pytest.raises(UsageError):
            parse_config_text("just words\n")

    def test_section(self):
        """Test prefix-stripped sections."""
        section = RunConfig().section('loss')
        assert section == {'wing_w': 10.0, 'wing_eps': 2.0}

    def test_write_then_read(self):
        """Test that a written config reads back to the same values."""
        config = RunConfig({'model.id': 'B-2', 'train.learning_rate': 3e-4, 'dream.normalize_grad': False})
        with tempfile.TemporaryDirectory() as tmp:
            path = config.write(Path(tmp) / 'config.resolved')
            restored = RunConfig.from_file(path)
        assert restored.values == config.values

    def test_flags_win_over_file(self):
        """Test that overrides passed to from_file beat the file."""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'run.cfg'
            path.write_text("train.epochs=3\ntrain.seed=1\n")
            config = RunConfig.from_file(path, {'train.seed': 2, 'train.batch_size': None})
        assert (config['train.epochs'], config['train.seed'], config['train.batch_size']) == (3, 2, 32)
