"""
Tests for training, evaluation and checkpoints.
"""

import pytest
import numpy as np
import tempfile
from pathlib import Path
import sys

# Add the src directory to the Python path for testing
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

import tensor as T
from tensor import Tensor, RngStream, gradient_check
from errors import ConfigurationError, CorruptCheckpointError
from config import RunConfig
from data_processor import Dataset, synth_generate
from model_spec import catalog
from models import build_model
from metrics import wing_loss
from trainer import (TrainConfig, Adam, RunLog, train, evaluate, predict, save_checkpoint, load_checkpoint,
                     read_manifest, MANIFEST_FILE, SPEC_FILE)

TINY = (24, 32)


def small_model(model_id='C-1', seed=0):
    """A narrow catalog model at the tiny input size."""
    spec = catalog(model_id, width=8, stem_depth=1, cardinality=2)
    return build_model(spec, TINY + (3,), rng=RngStream(seed))


def tiny_data(count=8, seed=0):
    return synth_generate(count, TINY, RngStream(seed))


class TestTrainConfig:
    """Test training configuration."""

    def test_zero_epochs_rejected(self):
        """Test that epochs = 0 is a configuration error naming the key."""
        with pytest.raises(ConfigurationError, match="train.epochs"):
            train(small_model(), tiny_data(), None, TrainConfig(epochs=0))

    def test_validate_messages(self):
        """Test that every bad field is reported."""
        errors = TrainConfig(epochs=0, batch_size=0, learning_rate=-1.0).validate()
        assert len(errors) == 3

    def test_from_run_config(self):
        """Test reading train, loss and metrics keys."""
        config = RunConfig().update({'train.epochs': 7, 'loss.wing_w': 5.0, 'metrics.tau': 0.1})
        cfg = TrainConfig.from_run_config(config)
        assert (cfg.epochs, cfg.wing_w, cfg.tau) == (7, 5.0, 0.1)


class TestAdam:
    """Test the optimizer."""

    def test_zero_learning_rate(self):
        """Test that lr = 0 leaves every weight unchanged with one log record."""
        model = small_model()
        before = model.state_dict()
        _, log = train(model, tiny_data(), None, TrainConfig(epochs=1, learning_rate=0.0, batch_size=4))
        assert len(log.records) == 1
        assert log.status == 'completed'
        for name, value in model.state_dict().items():
            np.testing.assert_array_equal(value, before[name])

    def test_first_step_moves_by_lr(self):
        """Test that the bias-corrected first step moves each weight by about lr."""
        model = small_model()
        weight = model.named_weights()[0][1]
        weight.grad = np.full(weight.shape, 3.0)
        start = weight.data.copy()
        Adam([weight], learning_rate=0.01).step()
        np.testing.assert_allclose(start - weight.data, 0.01, rtol=1e-6)


class TestTraining:
    """Test the training loop."""

    def test_same_seed_same_weights(self):
        """Test that the same seed gives bit-identical weights."""
        data = tiny_data()
        cfg = TrainConfig(epochs=2, batch_size=4, seed=3)
        a, _ = train(small_model(seed=1), data, None, cfg)
        b, _ = train(small_model(seed=1), data, None, cfg)
        for name, value in a.state_dict().items():
            np.testing.assert_array_equal(value, b.state_dict()[name])

    def test_callback_prunes(self):
        """Test that a callback returning False stops the run."""
        seen = []

        def stop_after_first(epoch, record):
            seen.append(epoch)
            return False

        _, log = train(small_model(), tiny_data(), tiny_data(2, seed=5), TrainConfig(epochs=5, batch_size=4),
                       epoch_callback=stop_after_first)
        assert seen == [1]
        assert log.status == 'pruned'
        assert log.records[0].val is not None

    def test_divergence_restores_weights(self):
        """Test that a non-finite loss restores the last good weights."""
        data = tiny_data(4)
        data.samples[0].points = data.samples[0].points * np.nan
        model = small_model()
        before = model.state_dict()
        _, log = train(model, data, None, TrainConfig(epochs=3, batch_size=4))
        assert log.status == 'diverged'
        assert log.records == []
        for name, value in model.state_dict().items():
            np.testing.assert_array_equal(value, before[name])

    def test_runlog_frame(self):
        """Test one row per epoch with validation columns."""
        _, log = train(small_model(), tiny_data(), tiny_data(2, seed=5), TrainConfig(epochs=2, batch_size=4))
        frame = log.to_frame()
        assert list(frame['epoch']) == [1, 2]
        assert list(frame.columns) == ['epoch', 'train_wing_loss', 'val_accuracy', 'val_wing_loss', 'val_mae',
                                       'val_mse']
        assert isinstance(log, RunLog)

    def test_empty_training_set(self):
        """Test that an empty training set is rejected."""
        with pytest.raises(ConfigurationError):
            train(small_model(), Dataset([]), None, TrainConfig(epochs=1))

    @pytest.mark.slow
    def test_loss_decreases(self):
        """Test that wing loss drops over a few epochs."""
        _, log = train(small_model('C-1', seed=2), tiny_data(16, seed=4), None,
                       TrainConfig(epochs=8, batch_size=8, learning_rate=3e-3))
        assert log.train_losses[-1] < log.train_losses[0]


class TestEvaluation:
    """Test prediction and evaluation."""

    def test_exact_model_scores_perfectly(self):
        """Test that a model emitting the targets exactly has accuracy 1 and zero loss."""
        data = tiny_data(4)
        points = data.samples[0].points.copy()
        for sample in data:
            sample.points = points.copy()
        model = small_model()
        dense = model.head.children['dense']
        dense.weights['weight'].data[...] = 0.0
        dense.weights['bias'].data[...] = data.samples[0].normalized_points().reshape(-1)
        report = evaluate(model, data)
        assert report.accuracy == 1.0
        assert report.wing_loss == 0.0
        assert report.mae == 0.0
        assert report.n_samples == 4

    def test_predict_shape(self):
        """Test one 2×N prediction per sample across batches."""
        assert predict(small_model(), tiny_data(5), batch_size=2).shape == (5, 2, 6)

    def test_sample_order_does_not_matter(self):
        """Test that evaluating a reversed dataset gives the same metrics."""
        model = small_model('B-2', seed=3)
        data = tiny_data(7, seed=4)
        forward = evaluate(model, data, batch_size=3)
        backward = evaluate(model, data.subset(list(reversed(range(len(data))))), batch_size=3)
        assert backward.n_samples == forward.n_samples
        assert backward.accuracy == forward.accuracy
        for key in ('wing_loss', 'mae', 'mse'):
            assert getattr(backward, key) == pytest.approx(getattr(forward, key), rel=1e-12)

    def test_wing_loss_gradient_through_a3(self):
        """Test the analytic input gradient of wing loss through a narrow A-3 model."""
        model = small_model('A-3', seed=5)
        image = RngStream(6).uniform(0.2, 0.8, TINY + (3,)).reshape(-1)
        target = RngStream(7).uniform(0.2, 0.8, (1, 2, 6))
        head, rest = image[:12], Tensor(image[12:])

        def loss(values):
            x = T.reshape(T.concat([values, rest], axis=0), (1,) + TINY + (3,))
            return wing_loss(model(x), target)

        assert gradient_check(loss, head) < 1e-4


class TestCheckpoint:
    """Test checkpoint save and load."""

    def test_round_trip(self):
        """Test identical outputs after reload and byte-identical re-save."""
        model = small_model('A-3', seed=4)
        images, _ = tiny_data(2).arrays()
        with tempfile.TemporaryDirectory() as tmp:
            first, second = Path(tmp) / 'a', Path(tmp) / 'b'
            save_checkpoint(model, first)
            restored = load_checkpoint(first)
            save_checkpoint(restored, second)
            np.testing.assert_array_equal(restored(images).data, model(images).data)
            assert restored.spec == model.spec
            for path in sorted(first.iterdir()):
                assert (second / path.name).read_bytes() == path.read_bytes()

    def test_manifest(self):
        """Test one manifest row per named weight with x-joined dims."""
        model = small_model()
        with tempfile.TemporaryDirectory() as tmp:
            save_checkpoint(model, tmp)
            manifest = read_manifest(tmp)
            assert list(manifest['name']) == [name for name, _ in model.named_weights()]
            assert manifest['dims'][0] == '3x3x3x16'
            assert (Path(tmp) / SPEC_FILE).is_file()

    def test_truncated_blob(self):
        """Test that a short blob is a corrupt checkpoint."""
        model = small_model()
        with tempfile.TemporaryDirectory() as tmp:
            save_checkpoint(model, tmp)
            blob = Path(tmp) / f"{model.named_weights()[0][0]}.bin"
            blob.write_bytes(blob.read_bytes()[:-8])
            with pytest.raises(CorruptCheckpointError):
                load_checkpoint(tmp)

    def test_missing_manifest(self):
        """Test that a checkpoint without a manifest is corrupt."""
        model = small_model()
        with tempfile.TemporaryDirectory() as tmp:
            save_checkpoint(model, tmp)
            (Path(tmp) / MANIFEST_FILE).unlink()
            with pytest.raises(CorruptCheckpointError):
                load_checkpoint(tmp)


class TestDeskScaleLearning:
    """A scaled A-3 model learning synthetic landmarks at 96×128."""

    @pytest.mark.slow
    def test_desk_scale_a3(self):
        """Test that 30 epochs bring validation MAE under 0.05 with a strictly falling loss for 10 epochs."""
        data = synth_generate(200, (96, 128), RngStream(0))
        train_set, val_set = data.subset(range(160)), data.subset(range(160, 200), 'val')
        spec = catalog('A-3', width=16, stride=2)
        model = build_model(spec, (96, 128, 3), rng=RngStream(1))
        config = TrainConfig(epochs=30, batch_size=32, eval_every=10, seed=0)
        _, log = train(model, train_set, val_set, config)
        assert log.status == 'completed'
        first_ten = log.train_losses[:10]
        assert all(later < earlier for earlier, later in zip(first_ten, first_ten[1:])), first_ten
        assert log.last_val().mae < 0.05, log.last_val().to_dict()

        from interpret import DreamConfig, activation_maximize
        result = activation_maximize(model, DreamConfig('stem.0', channel=0, steps=50, seed=3))
        assert result.trace[-1] > result.trace[0]
        assert 0.0 <= result.image.data.min() and result.image.data.max() <= 1.0
