"""
Tests for the hyperparameter search.
"""

import math
import pytest
import numpy as np
import tempfile
from pathlib import Path
import sys

# Add the src directory to the Python path for testing
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from tensor import RngStream
from config import RunConfig
from errors import ConfigurationError, ContractError, UsageError
from data_processor import synth_generate
from hpo import (Dimension, DimensionKind, SearchSpace, Study, uniform, log_uniform, integer, categorical,
                 asha_rungs, asha_decide, tpe_suggest, run_study, ParzenEstimator)

SMALL_MODEL = {'model.id': 'C-1', 'model.width': 8, 'model.stem_depth': 1}


def finished_study(values, objectives, space):
    """A study whose trials are complete with the given params and final objectives."""
    study = Study(space, max_epochs=1)
    for params, objective in zip(values, objectives):
        trial = study.new_trial(params)
        study.report(trial, 1, objective)
        trial.status = 'complete'
    return study


def report_through(study, trial, epoch, value):
    """Report `value` for every epoch up to `epoch`."""
    for e in range(len(trial.history) + 1, epoch + 1):
        study.report(trial, e, value)


class TestDimensions:
    """Test search dimensions and spaces."""

    @pytest.mark.parametrize("text, kind, low, high", [
        ('int:2:4', DimensionKind.INTEGER, 2, 4),
        ('float:0:0.5', DimensionKind.UNIFORM, 0.0, 0.5),
        ('log:1e-4:1e-2', DimensionKind.LOG_UNIFORM, 1e-4, 1e-2),
    ])
    def test_parse_numeric(self, text, kind, low, high):
        """Test numeric bound strings."""
        dimension = Dimension.parse('d', text)
        assert (dimension.kind, dimension.low, dimension.high) == (kind, low, high)

    def test_parse_choices(self):
        """Test that bar-separated choices keep their types."""
        dimension = Dimension.parse('width', '8|16|vit')
        assert dimension.choices == (8, 16, 'vit')

    def test_bad_bounds(self):
        """Test that low >= high and bad numbers are rejected."""
        with pytest.raises(ConfigurationError):
            uniform('x', 1.0, 1.0)
        with pytest.raises(UsageError):
            Dimension.parse('x', 'float:a:b')

    def test_prior_mean(self):
        """Test that uniform prior draws average to the midpoint."""
        rng = RngStream(0)
        draws = [uniform('x', 0.0, 1.0).sample_prior(rng) for _ in range(10_000)]
        assert 0.48 <= np.mean(draws) <= 0.52

    def test_prior_ranges(self):
        """Test that every prior draw stays inside its dimension."""
        rng = RngStream(1)
        for _ in range(200):
            assert 1e-4 <= log_uniform('lr', 1e-4, 1e-2).sample_prior(rng) <= 1e-2
            assert integer('depth', 2, 4).sample_prior(rng) in (2, 3, 4)
            assert categorical('kind', ['a', 'b']).sample_prior(rng) in ('a', 'b')

    def test_space_from_config(self):
        """Test that every search key except the settings becomes a dimension."""
        space = SearchSpace.from_config(RunConfig())
        assert 'trials' not in space.names()
        assert 'learning_rate' in space.names()
        assert space.dimensions['stem'].kind == DimensionKind.CATEGORICAL

    def test_apply_clears_catalog_id(self):
        """Test that searching the stem kind drops the catalog id."""
        space = SearchSpace([categorical('stem', ['resnext']), log_uniform('learning_rate', 1e-4, 1e-2)])
        config = space.apply({'stem': 'resnext', 'learning_rate': 0.005}, RunConfig(SMALL_MODEL))
        assert config['model.id'] == ''
        assert config['model.stem'] == 'resnext'
        assert config['train.learning_rate'] == 0.005


class TestTPE:
    """Test the Parzen estimator sampler."""

    def test_estimator_density_is_normalized(self):
        """Test that the truncated mixture integrates to about one over its bounds."""
        estimator = ParzenEstimator([0.2, 0.25, 0.7], 0.0, 1.0)
        grid = np.linspace(0.0, 1.0, 2001)
        assert np.exp(estimator.log_pdf(grid)).mean() == pytest.approx(1.0, abs=1e-2)

    def test_startup_uses_prior(self):
        """Test that fewer than ten complete trials draw from the prior."""
        space = SearchSpace([uniform('x', 0.0, 1.0)])
        study = finished_study([{'x': 0.1}] * 3, [0.1] * 3, space)
        a = tpe_suggest(study, RngStream(5))
        assert a == {'x': uniform('x', 0.0, 1.0).sample_prior(RngStream(5))}

    def test_numeric_suggestion_follows_good_trials(self):
        """Test that lower-is-better history steers suggestions toward the low end."""
        space = SearchSpace([uniform('x', 0.0, 1.0)])
        values = [i / 40 for i in range(40)]
        study = finished_study([{'x': v} for v in values], values, space)
        hits = sum(0.0 <= tpe_suggest(study, RngStream(seed))['x'] <= 0.3 for seed in range(100))
        assert hits >= 95

    def test_categorical_suggestion(self):
        """Test that a choice only good trials used wins."""
        space = SearchSpace([categorical('kind', ['a', 'b'])])
        params = [{'kind': 'a'}] * 3 + [{'kind': 'b'}] * 9
        objectives = [0.1] * 3 + [1.0] * 9
        study = finished_study(params, objectives, space)
        for seed in range(20):
            assert tpe_suggest(study, RngStream(seed), gamma=0.25)['kind'] == 'a'

    def test_integer_suggestion_in_range(self):
        """Test that integer suggestions are rounded into bounds."""
        space = SearchSpace([integer('depth', 1, 3)])
        study = finished_study([{'depth': 1 + i % 3} for i in range(12)], [i % 3 for i in range(12)], space)
        for seed in range(20):
            assert tpe_suggest(study, RngStream(seed))['depth'] in (1, 2, 3)

    def test_failed_trials_count_as_bad(self):
        """Test that failures enter the sampler with +inf."""
        space = SearchSpace([uniform('x', 0.0, 1.0)])
        study = finished_study([{'x': 0.1}] * 10, [0.5] * 10, space)
        failed = study.new_trial({'x': 0.9})
        failed.status = 'failed'
        assert failed.objective == math.inf
        assert study.finished()[-1] is failed


class TestASHA:
    """Test successive-halving rungs and decisions."""

    @pytest.mark.parametrize("epochs, rungs", [(20, [2, 6, 18]), (5, [2]), (2, []), (1, [])])
    def test_rungs(self, epochs, rungs):
        """Test rung epochs r·η^k strictly below the epoch budget."""
        assert asha_rungs(epochs) == rungs

    def test_decisions_use_arrival_snapshot(self):
        """Test the top-floor(k/η) rule on the reports seen so far."""
        study = Study(SearchSpace([uniform('x', 0.0, 1.0)]), max_epochs=20)
        trials = [study.new_trial({'x': 0.0}) for _ in range(4)]
        decisions = []
        for trial, value in zip(trials, [0.5, 0.3, 0.9, 0.1]):
            report_through(study, trial, 2, value)
            decisions.append(asha_decide(study, trial, 2))
        assert decisions == ['continue', 'prune', 'prune', 'continue']

    def test_later_reports_do_not_change_decision(self):
        """Test that a replayed decision ignores reports that arrived after it."""
        study = Study(SearchSpace([uniform('x', 0.0, 1.0)]), max_epochs=20)
        trials = [study.new_trial({'x': 0.0}) for _ in range(6)]
        for trial, value in zip(trials, [0.5, 0.4, 0.1, 0.05, 0.06, 0.07]):
            report_through(study, trial, 2, value)
        # ranks first of three on arrival, fourth of six overall
        assert asha_decide(study, trials[2], 2) == 'continue'
        assert asha_decide(study, trials[1], 2) == 'prune'
        assert asha_decide(study, trials[0], 2) == 'continue'

    def test_first_report_continues(self):
        """Test that the first report at a rung continues whatever its value."""
        study = Study(SearchSpace([uniform('x', 0.0, 1.0)]), max_epochs=20)
        trial = study.new_trial({'x': 0.0})
        report_through(study, trial, 2, 99.0)
        assert asha_decide(study, trial, 2) == 'continue'

    def test_second_report_promotes_nobody(self):
        """Test that the second arrival is pruned even when it is better than the first."""
        study = Study(SearchSpace([uniform('x', 0.0, 1.0)]), max_epochs=20)
        a, b = study.new_trial({'x': 0.0}), study.new_trial({'x': 0.0})
        report_through(study, a, 2, 0.2)
        report_through(study, b, 2, 0.1)
        assert asha_decide(study, a, 2) == 'continue'
        assert asha_decide(study, b, 2) == 'prune'

    def test_ties_go_to_lower_id(self):
        """Test that equal objectives rank by trial id."""
        study = Study(SearchSpace([uniform('x', 0.0, 1.0)]), max_epochs=20)
        trials = [study.new_trial({'x': 0.0}) for _ in range(3)]
        for trial in trials:
            report_through(study, trial, 2, 0.4)
        assert asha_decide(study, trials[2], 2) == 'prune'

    def test_off_rung_continues(self):
        """Test that epochs that are not rungs always continue."""
        study = Study(SearchSpace([uniform('x', 0.0, 1.0)]), max_epochs=20)
        trial = study.new_trial({'x': 0.0})
        report_through(study, trial, 3, 9.0)
        assert asha_decide(study, trial, 3) == 'continue'

    def test_missing_rung_report(self):
        """Test that deciding without a rung report is a contract error."""
        study = Study(SearchSpace([uniform('x', 0.0, 1.0)]), max_epochs=20)
        trial = study.new_trial({'x': 0.0})
        with pytest.raises(ContractError):
            asha_decide(study, trial, 2)

    def test_report_order_enforced(self):
        """Test that skipped epochs and reports after pruning are rejected."""
        study = Study(SearchSpace([uniform('x', 0.0, 1.0)]), max_epochs=20)
        trial = study.new_trial({'x': 0.0})
        with pytest.raises(ContractError):
            study.report(trial, 2, 0.1)
        study.report(trial, 1, 0.1)
        trial.status = 'pruned'
        with pytest.raises(ContractError):
            study.report(trial, 2, 0.1)


class TestStudy:
    """Test the study driver and persistence."""

    def test_best_prefers_lower_objective(self):
        """Test best() over complete trials only."""
        space = SearchSpace([uniform('x', 0.0, 1.0)])
        study = finished_study([{'x': 0.1}, {'x': 0.2}], [0.4, 0.3], space)
        pruned = study.new_trial({'x': 0.3})
        study.report(pruned, 1, 0.01)
        pruned.status = 'pruned'
        assert study.best().id == 1
        assert study.counts() == {'running': 0, 'pruned': 1, 'complete': 2, 'failed': 0}

    def test_save_and_load(self):
        """Test that a saved study resumes with its trials, reports and statuses."""
        space = SearchSpace([integer('stem_depth', 1, 3), categorical('stem', ['conv', 'resnext']),
                             log_uniform('learning_rate', 1e-4, 1e-2)])
        study = Study(space, max_epochs=5)
        done = study.new_trial({'stem_depth': 2, 'stem': 'resnext', 'learning_rate': 0.001})
        report_through(study, done, 5, 0.25)
        done.status = 'complete'
        interrupted = study.new_trial({'stem_depth': 3, 'stem': 'conv', 'learning_rate': 0.0005})
        report_through(study, interrupted, 1, 0.7)
        with tempfile.TemporaryDirectory() as tmp:
            study.save(tmp)
            restored = Study.load(tmp, space, max_epochs=5)
        assert [t.status for t in restored.trials] == ['complete', 'failed']
        assert restored.trials[0].params == done.params
        assert restored.trials[0].history == [0.25] * 5
        assert restored.reports == study.reports
        assert restored.rung_reports[2] == [(0, 0.25)]

    def test_needs_validation_set(self):
        """Test that an empty validation set is rejected."""
        space = SearchSpace([uniform('dropout', 0.0, 0.5)])
        data = synth_generate(4, (24, 32), RngStream(0))
        with pytest.raises(ConfigurationError):
            run_study(space, 1, 2, data, data.subset([]), RngStream(0))

    def test_single_trial_completes(self):
        """Test that one trial with no rung below its budget completes and keeps its model."""
        space = SearchSpace([uniform('dropout', 0.0, 0.5)])
        train_set = synth_generate(6, (24, 32), RngStream(0))
        val_set = synth_generate(2, (24, 32), RngStream(1))
        study = run_study(space, 1, 2, train_set, val_set, RngStream(3), base_config=RunConfig(SMALL_MODEL))
        assert [t.status for t in study.trials] == ['complete']
        assert len(study.trials[0].history) == 2
        assert study.best() is study.trials[0]
        assert study.best_model is not None

    def test_single_trial_past_a_rung_completes(self):
        """Test that a budget of one trial with a rung below its epochs still yields a best trial."""
        space = SearchSpace([uniform('dropout', 0.0, 0.5)])
        train_set = synth_generate(6, (24, 32), RngStream(0))
        val_set = synth_generate(2, (24, 32), RngStream(1))
        study = run_study(space, 1, 5, train_set, val_set, RngStream(3), base_config=RunConfig(SMALL_MODEL))
        assert [t.status for t in study.trials] == ['complete']
        assert len(study.trials[0].history) == 5
        assert study.best() is study.trials[0]

    def test_unbuildable_spec_fails_trial(self):
        """Test that a spec that cannot be built is recorded as failed."""
        space = SearchSpace([categorical('patch_size', [4])])
        train_set = synth_generate(4, (24, 32), RngStream(0))
        val_set = synth_generate(2, (24, 32), RngStream(1))
        base = RunConfig({'model.id': 'C-4', 'model.width': 8, 'model.stem_depth': 1})
        study = run_study(space, 2, 2, train_set, val_set, RngStream(0), base_config=base)
        assert study.counts()['failed'] == 2
        assert study.best() is None
        assert all(t.objective == math.inf for t in study.trials)

    @pytest.mark.slow
    def test_eight_trial_study(self):
        """Test a small search where ASHA prunes some trials and the best beats the first trial."""
        space = SearchSpace([uniform('dropout', 0.0, 0.5), log_uniform('learning_rate', 1e-4, 1e-2)])
        train_set = synth_generate(8, (24, 32), RngStream(0))
        val_set = synth_generate(3, (24, 32), RngStream(1))
        study = run_study(space, 8, 5, train_set, val_set, RngStream(0), base_config=RunConfig(SMALL_MODEL))
        counts = study.counts()
        assert sum(counts.values()) == 8
        assert counts['running'] == 0
        assert counts['pruned'] >= 1
        assert study.trials[0].status == 'complete'
        assert study.best() is not None
        assert study.best().objective <= study.trials[0].objective
        assert study.best().objective == min(t.objective for t in study.completed())
