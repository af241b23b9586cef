"""
Tests for the main module.
"""

import pytest
import sys
import tempfile
import argparse
from pathlib import Path

import pandas as pd

# Add the src directory to the Python path for testing
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from main import main, resolve_config, EXIT_OK, EXIT_USAGE, EXIT_FAILURE, RESOLVED_CONFIG, CHECKPOINT_DIR
from trainer import MANIFEST_FILE

SMALL_MODEL_FLAGS = ['--set', 'model.width=8', '--set', 'model.stem_depth=1', '--set', 'model.cardinality=2']


def test_main_function():
    """Test that running without a command prints help and reports a usage error."""
    assert main([]) == EXIT_USAGE


def test_help_exits_cleanly():
    """Test that --help exits with status 0."""
    with pytest.raises(SystemExit) as excinfo:
        main(['--help'])
    assert excinfo.value.code == 0


class TestUsageErrors:
    """Test that bad invocations return exit code 1."""

    def test_unknown_flag(self):
        """Test that an unknown flag is a usage error."""
        with tempfile.TemporaryDirectory() as tmp:
            assert main(['synth', '--out', tmp, '--bogus']) == EXIT_USAGE

    def test_unknown_command(self):
        """Test that an unknown command is a usage error."""
        assert main(['fly']) == EXIT_USAGE

    def test_zero_epochs(self):
        """Test that train.epochs = 0 is rejected before any data is read."""
        with tempfile.TemporaryDirectory() as tmp:
            assert main(['train', '--data', tmp, '--epochs', '0', '--out', tmp]) == EXIT_USAGE

    def test_unknown_config_key(self):
        """Test that --set with an unknown key is a usage error."""
        with tempfile.TemporaryDirectory() as tmp:
            assert main(['catalog', '--scale', 'tiny', '--set', 'model.colour=red', '--out', tmp]) == EXIT_USAGE

    def test_unknown_catalog_id(self):
        """Test that an unknown model id is a usage error."""
        assert main(['catalog', '--scale', 'tiny', '--models', 'Z-9']) == EXIT_USAGE

    def test_bad_dims(self):
        """Test that malformed and too-small synth dims are usage errors."""
        with tempfile.TemporaryDirectory() as tmp:
            assert main(['synth', '--dims', '24by32', '--out', tmp]) == EXIT_USAGE
            assert main(['synth', '--dims', '16x32', '--out', tmp]) == EXIT_USAGE

    def test_missing_checkpoint(self):
        """Test that a missing checkpoint directory is a usage error."""
        with tempfile.TemporaryDirectory() as tmp:
            missing = str(Path(tmp) / 'nothing')
            assert main(['eval', '--checkpoint', missing, '--data', tmp]) == EXIT_USAGE


class TestRuntimeErrors:
    """Test that failures while running return exit code 2."""

    def test_corrupt_checkpoint(self):
        """Test that a checkpoint without its files fails at runtime."""
        with tempfile.TemporaryDirectory() as tmp:
            assert main(['synth', '--count', '2', '--dims', '24x32', '--out', tmp]) == EXIT_OK
            assert main(['eval', '--checkpoint', tmp, '--data', tmp]) == EXIT_FAILURE


class TestConfigResolution:
    """Test config layering for commands."""

    def test_flags_beat_file_beat_scale(self):
        """Test defaults < scale overrides < config file < flags."""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'run.cfg'
            path.write_text("train.epochs=7\nmodel.stem_stride=3\n# comment\ntrain.seed=4\n")
            args = argparse.Namespace(config=str(path), set=['train.seed=9'])
            config = resolve_config(args, {'data.scale': 'desk', 'train.batch_size': 8, 'train.epochs': None})
        assert config['model.width'] == 16
        assert config['model.stem_stride'] == 3
        assert config['train.epochs'] == 7
        assert config['train.batch_size'] == 8
        assert config['train.seed'] == 9

    def test_missing_config_file(self):
        """Test that a missing --config path is a usage error."""
        with tempfile.TemporaryDirectory() as tmp:
            missing = str(Path(tmp) / 'none.cfg')
            assert main(['catalog', '--scale', 'tiny', '--models', 'C-1', '--config', missing]) == EXIT_USAGE


class TestCommands:
    """Test commands end to end."""

    def test_synth_writes_dataset(self):
        """Test that synth writes images and annotations."""
        with tempfile.TemporaryDirectory() as tmp:
            assert main(['synth', '--count', '3', '--dims', '24x32', '--seed', '1', '--out', tmp]) == EXIT_OK
            frame = pd.read_csv(Path(tmp) / 'annotations.csv')
            assert len(frame) == 3
            assert len(list(Path(tmp).glob('*.png'))) == 3

    def test_catalog_table(self):
        """Test catalog output rows."""
        with tempfile.TemporaryDirectory() as tmp:
            assert main(['catalog', '--scale', 'tiny', '--models', 'C-1,A-3', '--set', 'model.width=8',
                         '--out', tmp]) == EXIT_OK
            frame = pd.read_csv(Path(tmp) / 'catalog.tsv', sep='\t')
            assert list(frame['model']) == ['C-1', 'A-3']

    def test_synth_and_augment_write_resolved_config(self):
        """Test that dataset commands leave config.resolved beside their output."""
        with tempfile.TemporaryDirectory() as tmp:
            data, augmented = Path(tmp) / 'data', Path(tmp) / 'augmented'
            assert main(['synth', '--count', '2', '--dims', '24x32', '--out', str(data),
                         '--set', 'train.seed=5']) == EXIT_OK
            assert 'train.seed=5\n' in (data / RESOLVED_CONFIG).read_text()
            assert main(['augment', '--data', str(data), '--out', str(augmented)]) == EXIT_OK
            assert (augmented / RESOLVED_CONFIG).is_file()
            assert len(pd.read_csv(augmented / 'annotations.csv')) == 6

    @pytest.mark.slow
    def test_search_writes_config_it_used(self):
        """Test that the resolved search config carries search.epochs into train.epochs."""
        with tempfile.TemporaryDirectory() as tmp:
            data, run = Path(tmp) / 'data', Path(tmp) / 'search'
            assert main(['synth', '--count', '10', '--dims', '24x32', '--out', str(data)]) == EXIT_OK
            assert main(['search', '--data', str(data), '--scale', 'tiny', '--trials', '1', '--epochs', '3',
                         '--out', str(run), '--set', 'search.stem=conv', '--set', 'search.branch=none',
                         '--set', 'search.width=8', '--set', 'search.stem_depth=int:1:2']) == EXIT_OK
            text = (run / RESOLVED_CONFIG).read_text()
            assert 'search.epochs=3\n' in text
            assert 'train.epochs=3\n' in text

    @pytest.mark.slow
    def test_train_twice_gives_identical_checkpoints(self):
        """Test that two runs of the same resolved config write byte-identical checkpoints."""
        with tempfile.TemporaryDirectory() as tmp:
            data = Path(tmp) / 'data'
            assert main(['synth', '--count', '8', '--dims', '24x32', '--out', str(data)]) == EXIT_OK
            runs = [Path(tmp) / 'first', Path(tmp) / 'second']
            for run in runs:
                assert main(['train', '--data', str(data), '--model', 'B-2', '--scale', 'tiny', '--epochs', '2',
                             '--batch-size', '4', '--seed', '11', '--out', str(run)] + SMALL_MODEL_FLAGS) == EXIT_OK
            first, second = (sorted((run / CHECKPOINT_DIR).iterdir()) for run in runs)
            assert [p.name for p in first] == [p.name for p in second]
            for a, b in zip(first, second):
                assert a.read_bytes() == b.read_bytes(), a.name
            assert (runs[0] / RESOLVED_CONFIG).read_text() == (runs[1] / RESOLVED_CONFIG).read_text()

    @pytest.mark.slow
    def test_synth_train_eval_dream(self):
        """Test the full pipeline on a tiny synthetic dataset."""
        with tempfile.TemporaryDirectory() as tmp:
            data, run = Path(tmp) / 'data', Path(tmp) / 'run'
            assert main(['synth', '--count', '12', '--dims', '24x32', '--out', str(data)]) == EXIT_OK
            assert main(['train', '--data', str(data), '--model', 'A-3', '--scale', 'tiny', '--epochs', '2',
                         '--batch-size', '4', '--out', str(run)] + SMALL_MODEL_FLAGS) == EXIT_OK
            assert (run / RESOLVED_CONFIG).is_file()
            assert (run / CHECKPOINT_DIR / MANIFEST_FILE).is_file()
            runlog = pd.read_csv(run / 'runlog.tsv', sep='\t')
            assert list(runlog['epoch']) == [1, 2]
            metrics = pd.read_csv(run / 'metrics.tsv', sep='\t')
            assert list(metrics['split']) == ['train', 'val']

            assert main(['eval', '--checkpoint', str(run / CHECKPOINT_DIR), '--data', str(data),
                         '--out', str(run / 'eval')]) == EXIT_OK
            assert (run / 'eval' / RESOLVED_CONFIG).is_file()
            evaluated = pd.read_csv(run / 'eval' / 'metrics.tsv', sep='\t')
            assert 0.0 <= evaluated['accuracy'][0] <= 1.0

            assert main(['dream', '--checkpoint', str(run / CHECKPOINT_DIR), '--layer', 'stem.0', '--steps', '3',
                         '--out', str(run / 'dream')]) == EXIT_OK
            assert (run / 'dream' / 'dream.png').is_file()
            trace = pd.read_csv(run / 'dream' / 'dream_trace.tsv', sep='\t')
            assert len(trace) == 4
