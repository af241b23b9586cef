#!/usr/bin/env python3
"""
Main entry point for the thermal landmark toolkit.

Commands: synth, augment, train, eval, search, dream, catalog, experiment.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, Any, List, Optional, Tuple

import pandas as pd

# Add the src directory to the Python path
sys.path.insert(0, str(Path(__file__).parent))

from config import Config, RunConfig, RUN_CONFIG_DEFAULTS, parse_config_text
from data_processor import Dataset, load_dataset, write_dataset, augment_dataset, split_dataset, synth_generate
from errors import LandmarkError, UsageError, ConfigurationError, CatalogLookupError
from experiments import PROTOCOLS, run_protocol
from hpo import SearchSpace, Study, run_study, TRIALS_FILE
from interpret import DreamConfig, activation_maximize
from model_spec import ModelSpec, catalog_ids
from models import build_model, catalog_table
from report_renderer import ReportRenderer, CATALOG_FILE, RESULTS_FILE, format_metrics, format_table
from tensor import RngStream
from trainer import TrainConfig, train, evaluate, save_checkpoint, load_checkpoint

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2
RESOLVED_CONFIG = 'config.resolved'
CHECKPOINT_DIR = 'checkpoint'

# Stream ids under the run seed
SPLIT_STREAM = 7
AUGMENT_STREAM = 8
MODEL_STREAM = 9


class CliParser(argparse.ArgumentParser):
    """Argument parser that reports bad flags as usage errors instead of exiting."""

    def error(self, message):
        raise UsageError(message, key=self.prog)


def _existing_dir(flag: str, value: Optional[str]) -> Path:
    if value is None:
        raise UsageError(f"{flag} is required", key=flag)
    path = Path(value)
    if not path.is_dir():
        raise UsageError(f"{flag}: directory not found: {path}", key=flag)
    return path


def _parse_dims(text: str) -> Tuple[int, int]:
    try:
        height, width = (int(v) for v in text.lower().split('x'))
    except ValueError:
        raise UsageError(f"--dims must look like HxW, got '{text}'", key='--dims')
    return height, width


def _parse_sets(pairs: List[str]) -> Dict[str, str]:
    values = {}
    for pair in pairs or []:
        if '=' not in pair:
            raise UsageError(f"--set expects key=value, got '{pair}'", key='--set')
        key, value = pair.split('=', 1)
        values[key.strip()] = value.strip()
    return values


def resolve_config(args, flag_values: Dict[str, Any]) -> RunConfig:
    """Defaults, then scale overrides, then the config file, then flags (flags win)."""
    file_values = {}
    if getattr(args, 'config', None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"Config file not found: {path}", key='--config')
        file_values = parse_config_text(path.read_text(encoding='utf-8'))
    flag_values = {k: v for k, v in flag_values.items() if v is not None}
    flag_values.update(_parse_sets(getattr(args, 'set', None)))
    scale = flag_values.get('data.scale') or file_values.get('data.scale') or RUN_CONFIG_DEFAULTS['data.scale']
    config = RunConfig(Config.get_scale_overrides(scale))
    config.update(file_values)
    config.update(flag_values)
    return config


def _train_config(config: RunConfig) -> TrainConfig:
    train_config = TrainConfig.from_run_config(config)
    errors = train_config.validate()
    if errors:
        raise UsageError("; ".join(errors), key=errors[0].split()[0])
    return train_config


def _load_splits(args, config: RunConfig, rng: RngStream) -> Tuple[Dataset, Dataset, Dataset]:
    data = load_dataset(_existing_dir('--data', args.data))
    if len(data) == 0:
        raise UsageError(f"--data: {args.data} holds no samples", key='--data')
    if getattr(args, 'val', None):
        val = load_dataset(_existing_dir('--val', args.val), split='val')
        return data, val, Dataset([], split='test', image_dims=data.image_dims)
    return split_dataset(data, config['data.val_fraction'], config['data.test_fraction'], rng.split(SPLIT_STREAM))


def _model_spec(config: RunConfig) -> ModelSpec:
    return ModelSpec.from_dict(config.section('model'))


# Commands

def cmd_synth(args) -> int:
    """Generate a synthetic thermal-face dataset."""
    out = Path(args.out)
    dims = _parse_dims(args.dims)
    config = resolve_config(args, {})
    dataset = synth_generate(args.count, dims, RngStream(args.seed))
    write_dataset(dataset, out, bit_depth=args.bit_depth)
    config.write(out / RESOLVED_CONFIG)
    print(f"✓ Wrote {len(dataset)} synthetic {dims[0]}x{dims[1]} samples to {out}")
    return EXIT_OK


def cmd_augment(args) -> int:
    """Append one left and one right rotation per sample."""
    config = resolve_config(args, {})
    dataset = load_dataset(_existing_dir('--data', args.data))
    augmented = augment_dataset(dataset, RngStream(args.seed).split(AUGMENT_STREAM))
    write_dataset(augmented, Path(args.out), bit_depth=args.bit_depth)
    config.write(Path(args.out) / RESOLVED_CONFIG)
    print(f"✓ Augmented {len(dataset)} samples to {len(augmented)} in {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    """Train one model and write checkpoint, run log and metrics."""
    config = resolve_config(args, {
        'model.id': args.model, 'data.scale': args.scale, 'train.epochs': args.epochs,
        'train.batch_size': args.batch_size, 'train.learning_rate': args.learning_rate, 'train.seed': args.seed,
    })
    train_config = _train_config(config)
    renderer = ReportRenderer(args.out)
    config.write(Path(args.out) / RESOLVED_CONFIG)

    rng = RngStream(config['train.seed'])
    train_set, val_set, test_set = _load_splits(args, config, rng)
    if config['data.augment']:
        train_set = augment_dataset(train_set, rng.split(AUGMENT_STREAM))
    model = build_model(_model_spec(config), train_set.input_shape, rng=rng.split(MODEL_STREAM))
    model, log = train(model, train_set, val_set, train_config)

    save_checkpoint(model, Path(args.out) / CHECKPOINT_DIR)
    renderer.write_runlog(log.to_frame())
    reports = {'train': evaluate(model, train_set, train_config.batch_size, train_config.wing_w,
                                 train_config.wing_eps, train_config.tau)}
    for name, dataset in (('val', val_set), ('test', test_set)):
        if len(dataset):
            reports[name] = evaluate(model, dataset, train_config.batch_size, train_config.wing_w,
                                     train_config.wing_eps, train_config.tau)
    renderer.write_metrics(reports)
    print(format_metrics(reports))
    if log.status == 'diverged':
        logger.error("Training diverged; checkpoint holds the last finite weights")
        return EXIT_FAILURE
    return EXIT_OK


def cmd_eval(args) -> int:
    """Evaluate a checkpoint on a dataset."""
    checkpoint = _existing_dir('--checkpoint', args.checkpoint)
    config = resolve_config(args, {})
    model = load_checkpoint(checkpoint)
    dataset = load_dataset(_existing_dir('--data', args.data), split='test')
    report = evaluate(model, dataset, config['train.batch_size'], config['loss.wing_w'],
                      config['loss.wing_eps'], config['metrics.tau'])
    out = Path(args.out) if args.out else checkpoint.parent
    ReportRenderer(out).write_metrics({'eval': report})
    config.write(out / RESOLVED_CONFIG)
    print(format_metrics({'eval': report}))
    return EXIT_OK


def cmd_search(args) -> int:
    """TPE + ASHA search; writes study files and the best checkpoint."""
    config = resolve_config(args, {
        'data.scale': args.scale, 'search.trials': args.trials, 'search.epochs': args.epochs,
        'search.jobs': args.jobs, 'train.seed': args.seed,
    })
    out = Path(args.out)
    _train_config(config.update({'train.epochs': config['search.epochs']}))
    config.write(out / RESOLVED_CONFIG)
    space = SearchSpace.from_config(config)
    rng = RngStream(config['train.seed'])
    train_set, val_set, _ = _load_splits(args, config, rng)
    if config['data.augment']:
        train_set = augment_dataset(train_set, rng.split(AUGMENT_STREAM))

    study = None
    if args.resume and (out / TRIALS_FILE).is_file():
        study = Study.load(out, space, config['search.epochs'])
    study = run_study(space, config['search.trials'], config['search.epochs'], train_set, val_set,
                      rng.split(MODEL_STREAM), base_config=config, jobs=config['search.jobs'], study=study,
                      on_trial_end=lambda s, t: s.save(out))
    study.save(out)
    best = study.best()
    if best is None:
        logger.warning("No trial completed; no best checkpoint written")
        print(f"Study finished: {study.counts()}, no complete trial")
        return EXIT_OK
    if study.best_model is not None:
        save_checkpoint(study.best_model, out / CHECKPOINT_DIR)
    print(f"✓ Best trial {best.id}: wing loss {best.objective:.4f}")
    print(f"  Params: {best.params}")
    return EXIT_OK


def cmd_dream(args) -> int:
    """Activation maximization on a trained checkpoint."""
    checkpoint = _existing_dir('--checkpoint', args.checkpoint)
    config = resolve_config(args, {
        'dream.layer': args.layer, 'dream.channel': args.channel, 'dream.steps': args.steps,
        'dream.step_size': args.step_size, 'dream.seed': args.seed,
    })
    dream_config = DreamConfig.from_run_config(config)
    errors = dream_config.validate()
    if errors:
        raise UsageError("; ".join(errors), key=errors[0].split()[0])
    out = Path(args.out)
    config.write(out / RESOLVED_CONFIG)
    model = load_checkpoint(checkpoint)
    result = activation_maximize(model, dream_config)
    renderer = ReportRenderer(out)
    renderer.write_image(result.image)
    renderer.write_trace(result.trace, result.status)
    print(f"✓ Dream {result.status}: objective {result.trace[0]:.5f} -> {result.trace[-1]:.5f}")
    return EXIT_OK


def cmd_catalog(args) -> int:
    """Parameter counts of the catalog models at a given scale."""
    config = resolve_config(args, {'data.scale': args.scale})
    input_shape = Config.get_input_shape(config['data.scale'])
    model = config.section('model')
    overrides = {'width': model['width'], 'stride': model['stem_stride'], 'kernel_size': model['kernel_size'],
                 'cardinality': model['cardinality'], 'stem_depth': model['stem_depth'],
                 'branch_depth': model['branch_depth'], 'patch_size': model['patch_size'],
                 'model_dim': model['model_dim'], 'heads': model['heads']}
    ids = args.models.split(',') if args.models else catalog_ids()
    rows = catalog_table(input_shape, ids, **overrides)
    if args.out:
        ReportRenderer(args.out).write_rows(rows, CATALOG_FILE)
        config.write(Path(args.out) / RESOLVED_CONFIG)
    print(format_table(pd.DataFrame(rows)))
    return EXIT_OK


def cmd_experiment(args) -> int:
    """Run one experiment protocol over catalog models."""
    config = resolve_config(args, {'data.scale': args.scale, 'train.epochs': args.epochs, 'train.seed': args.seed})
    _train_config(config)
    out = Path(args.out)
    config.write(out / RESOLVED_CONFIG)
    rng = RngStream(config['train.seed'])
    train_set, val_set, test_set = _load_splits(args, config, rng)
    ids = args.models.split(',') if args.models else None
    results = run_protocol(args.protocol, train_set, val_set, test_set, config, ids=ids, rng=rng.split(MODEL_STREAM))
    ReportRenderer(out).write_table(results, RESULTS_FILE)
    print(format_table(results))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    formatter = argparse.ArgumentDefaultsHelpFormatter
    parser = CliParser(prog='landmarks', description='Thermal facial landmark toolkit', formatter_class=formatter)
    parser.add_argument('--log-level', default=Config.LOG_LEVEL, help='logging level')
    commands = parser.add_subparsers(dest='command', metavar='command')

    def command(name, handler, help_text):
        sub = commands.add_parser(name, help=help_text, description=help_text, formatter_class=formatter)
        sub.set_defaults(handler=handler)
        return sub

    def config_flags(sub):
        sub.add_argument('--config', default=None, help='run config file (key=value lines)')
        sub.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                         help='override one config key; repeatable')

    sub = command('synth', cmd_synth, 'generate a synthetic dataset')
    config_flags(sub)
    sub.add_argument('--count', type=int, default=200, help='number of samples')
    sub.add_argument('--dims', default='96x128', help='image size HxW')
    sub.add_argument('--seed', type=int, default=Config.DEFAULT_SEED, help='random seed')
    sub.add_argument('--bit-depth', type=int, default=16, choices=(8, 16), help='PNG bit depth')
    sub.add_argument('--out', required=True, help='output dataset directory')

    sub = command('augment', cmd_augment, 'append rotated copies of every sample')
    config_flags(sub)
    sub.add_argument('--data', required=True, help='input dataset directory')
    sub.add_argument('--seed', type=int, default=Config.DEFAULT_SEED, help='random seed')
    sub.add_argument('--bit-depth', type=int, default=16, choices=(8, 16), help='PNG bit depth')
    sub.add_argument('--out', required=True, help='output dataset directory')

    sub = command('train', cmd_train, 'train one model')
    config_flags(sub)
    sub.add_argument('--data', required=True, help='dataset directory (split by data.val_fraction)')
    sub.add_argument('--val', default=None, help='separate validation dataset directory')
    sub.add_argument('--model', default=None, help='catalog id, e.g. A-3')
    sub.add_argument('--scale', default=None, choices=sorted(Config.INPUT_SCALES), help='input scale preset')
    sub.add_argument('--epochs', type=int, default=None, help='training epochs (config: train.epochs)')
    sub.add_argument('--batch-size', type=int, default=None, help='batch size (config: train.batch_size)')
    sub.add_argument('--learning-rate', type=float, default=None, help='Adam learning rate')
    sub.add_argument('--seed', type=int, default=None, help='random seed (config: train.seed)')
    sub.add_argument('--out', required=True, help='output directory')

    sub = command('eval', cmd_eval, 'evaluate a checkpoint')
    config_flags(sub)
    sub.add_argument('--checkpoint', required=True, help='checkpoint directory')
    sub.add_argument('--data', required=True, help='dataset directory')
    sub.add_argument('--out', default=None, help='directory for metrics.tsv (default: beside the checkpoint)')

    sub = command('search', cmd_search, 'TPE + ASHA architecture search')
    config_flags(sub)
    sub.add_argument('--data', required=True, help='dataset directory')
    sub.add_argument('--val', default=None, help='separate validation dataset directory')
    sub.add_argument('--scale', default=None, choices=sorted(Config.INPUT_SCALES), help='input scale preset')
    sub.add_argument('--trials', type=int, default=None, help='trial budget (config: search.trials)')
    sub.add_argument('--epochs', type=int, default=None, help='epochs per trial (config: search.epochs)')
    sub.add_argument('--jobs', type=int, default=None, help='concurrent trials (config: search.jobs)')
    sub.add_argument('--seed', type=int, default=None, help='random seed (config: train.seed)')
    sub.add_argument('--resume', action='store_true', help='continue the study found in --out')
    sub.add_argument('--out', required=True, help='output directory')

    sub = command('dream', cmd_dream, 'activation maximization')
    config_flags(sub)
    sub.add_argument('--checkpoint', required=True, help='checkpoint directory')
    sub.add_argument('--layer', default=None, help='layer name, e.g. stem.0 (config: dream.layer)')
    sub.add_argument('--channel', type=int, default=None, help='channel index, -1 for the whole layer')
    sub.add_argument('--steps', type=int, default=None, help='ascent steps (config: dream.steps)')
    sub.add_argument('--step-size', type=float, default=None, help='ascent step size (config: dream.step_size)')
    sub.add_argument('--seed', type=int, default=None, help='noise seed (config: dream.seed)')
    sub.add_argument('--out', required=True, help='output directory')

    sub = command('catalog', cmd_catalog, 'list catalog models with parameter counts')
    config_flags(sub)
    sub.add_argument('--scale', default=None, choices=sorted(Config.INPUT_SCALES), help='input scale preset')
    sub.add_argument('--models', default=None, help='comma-separated catalog ids (default: all)')
    sub.add_argument('--out', default=None, help='directory for catalog.tsv')

    sub = command('experiment', cmd_experiment, 'run an experiment protocol over catalog models')
    config_flags(sub)
    sub.add_argument('--protocol', required=True, choices=PROTOCOLS, help='experiment protocol')
    sub.add_argument('--data', required=True, help='dataset directory')
    sub.add_argument('--val', default=None, help='separate validation dataset directory')
    sub.add_argument('--models', default=None, help='comma-separated catalog ids (default: all)')
    sub.add_argument('--scale', default=None, choices=sorted(Config.INPUT_SCALES), help='input scale preset')
    sub.add_argument('--epochs', type=int, default=None, help='training epochs (config: train.epochs)')
    sub.add_argument('--seed', type=int, default=None, help='random seed (config: train.seed)')
    sub.add_argument('--out', required=True, help='output directory')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run one command and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    if not getattr(args, 'command', None):
        parser.print_help()
        return EXIT_USAGE
    logging.getLogger().setLevel(str(args.log_level).upper())

    try:
        return args.handler(args)
    except (UsageError, ConfigurationError, CatalogLookupError) as e:
        logger.error(f"Usage error in '{args.command}': {e}")
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (LandmarkError, OSError, ValueError) as e:
        logger.error(f"'{args.command}' failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
