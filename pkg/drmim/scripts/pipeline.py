#! /usr/bin/env python3
"""
Command-line entry points: train, track, eval, prune-report, synth, selftest,
sweep and ablate. Every failure exits non-zero after a single stderr line of
the form "drmim <command> error=<code> type=<ExcName> message=<text>".
"""

import logging
import os
from functools import partial

import click
import click_log
import unicodecsv

from drmim import benchmark
from drmim import config as drmim_config
from drmim.checkpoint import load_checkpoint
from drmim.data import GROUNDTRUTH_FILENAME, generate_synthetic, load_sequence, parse_groundtruth, save_sequence
from drmim.evaluation import (
    evaluate_sequence,
    fps_report,
    plot_precision,
    plot_success,
    write_report,
    write_table
)
from drmim.exception import DrmimError, SequenceParseError
from drmim.scripts.helpers import ERR_SELFTEST, _config_or_exit, _fail, _fail_exception, _log
from drmim.selftest import run_selftest
from drmim.tracker import track_sequence, write_results
from drmim.trainer import train as train_model
from drmim.utils import GRADCHECK_SEEDS

LOG = logging.getLogger('drmim')
click_log.basic_config(LOG)

CHECKPOINT_FILENAME = 'model.ckpt'
TRAIN_LOG_FILENAME = 'train_log.csv'
TIMING_FILENAME = 'timing.csv'
TIMING_HEADER = ('sequence', 'frames', 'seconds', 'fps')
REPORT_FILENAME = 'report.csv'
PRECISION_PLOT_FILENAME = 'precision_plot.svg'
SUCCESS_PLOT_FILENAME = 'success_plot.svg'
PARAMETER_TABLE_HEADER = ('layer', 'in_channels', 'out_channels', 'kernel', 'params')
SWEEP_FILENAME = 'sweep.csv'
ABLATION_FILENAME = 'ablation.csv'

# Failures that are reported as one error line; anything else is a bug and keeps its traceback.
HANDLED_ERRORS = (DrmimError, OSError)


def config_options(func):
    """
    --config / --seed / --mu, shared by every command that reads settings.
    """
    func = click.option('--mu', type=float, default=None, help='Global pruning ratio; overrides the config file.')(func)
    func = click.option('--seed', type=int, default=None, help='Random seed; overrides the config file.')(func)
    func = click.option(
        '--config', 'config_file', type=click.Path(exists=True, dir_okay=False), default=None,
        help='YAML mapping or key=value file of run settings.'
    )(func)
    return func


def _settings(kind, config_file, seed, mu):
    return _config_or_exit(partial(_fail_exception, kind), config_file, {'seed': seed, 'mu': mu})


def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


@click.group()
def cli():
    """
    Train, prune, run and evaluate the disentangled-representation Siamese tracker.
    """


@cli.command()
@config_options
@click.option('--out', 'out_dir', default='run', show_default=True, help='Directory for the checkpoint and log.')
@click.option(
    '--data', 'data_dirs', multiple=True, type=click.Path(exists=True, file_okay=False),
    help='Sequence directory to train on; repeatable. Synthetic sequences are generated when omitted.'
)
@click.option('--resume', type=click.Path(exists=True, dir_okay=False), default=None,
              help='Checkpoint to continue training from.')
@click_log.simple_verbosity_option(LOG, default='INFO')
def train(config_file, seed, mu, out_dir, data_dirs, resume):
    """
    Train a model and write model.ckpt plus train_log.csv into --out.
    """
    settings = _settings('train', config_file, seed, mu)
    try:
        _ensure_dir(out_dir)
        if data_dirs:
            sequences = [load_sequence(directory) for directory in data_dirs]
        else:
            sequences = benchmark.synthetic_sequences(
                settings, settings['train_sequences'], benchmark.TRAIN_SEED_BASE
            )
            LOG.info("No --data given, training on %d synthetic sequences", len(sequences))
        checkpoint_path = os.path.join(out_dir, CHECKPOINT_FILENAME)
        train_config = drmim_config.train_config_from(
            settings, checkpoint_path, os.path.join(out_dir, TRAIN_LOG_FILENAME)
        )
        params, records = train_model(
            train_config, sequences, spec=drmim_config.architecture_from(settings), resume_from=resume
        )
    except HANDLED_ERRORS as exc:
        _fail_exception('train', exc)
    if records:
        _log('train', f'step {params.step} total={records[-1].total:.6f}; checkpoint {checkpoint_path}')
    else:
        _log('train', f'already at step {params.step}; checkpoint {checkpoint_path}')


@cli.command()
@click.option('--checkpoint', 'checkpoint_path', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--sequence', 'sequence_dirs', required=True, multiple=True,
              type=click.Path(exists=True, file_okay=False), help='Sequence directory to track; repeatable.')
@config_options
@click.option('--out', 'out_dir', default='results', show_default=True,
              help='Directory for <sequence>.txt results and timing.csv.')
@click_log.simple_verbosity_option(LOG, default='INFO')
def track(checkpoint_path, sequence_dirs, config_file, seed, mu, out_dir):
    """
    One-pass tracking: initialize on the first ground-truth box, then follow the target.
    """
    settings = _settings('track', config_file, seed, mu)
    try:
        params = load_checkpoint(checkpoint_path, drmim_config.architecture_from(settings))
        tracker_config = drmim_config.tracker_config_from(settings)
        _ensure_dir(out_dir)
        timing_rows = []
        for directory in sequence_dirs:
            sequence = load_sequence(directory, load_frames=False)
            result = track_sequence(params, sequence, tracker_config)
            write_results(os.path.join(out_dir, f'{sequence.name}.txt'), result.boxes)
            timing_rows.append([sequence.name, str(len(sequence)), repr(sum(result.update_times)),
                                f'{fps_report(result.update_times):.3f}'])
        write_table(os.path.join(out_dir, TIMING_FILENAME), TIMING_HEADER, timing_rows)
    except HANDLED_ERRORS as exc:
        _fail_exception('track', exc)
    _log('track', f'tracked {len(timing_rows)} sequences into {out_dir}')


def _read_timings(results_dir):
    """
    sequence name -> FPS from a track timing.csv, empty if there is none.
    """
    path = os.path.join(results_dir, TIMING_FILENAME)
    if not os.path.isfile(path):
        return {}
    with open(path, 'rb') as handle:
        return {row['sequence']: float(row['fps']) for row in unicodecsv.DictReader(handle, encoding='utf-8')}


@cli.command(name='eval')
@click.option('--results', 'results_dir', required=True, type=click.Path(exists=True, file_okay=False),
              help='Directory of <sequence>.txt tracker outputs.')
@click.option('--sequence', 'sequence_dirs', required=True, multiple=True,
              type=click.Path(exists=True, file_okay=False), help='Ground-truth sequence directory; repeatable.')
@click.option('--out', 'out_dir', default='report', show_default=True,
              help='Directory for report.csv and the SVG plots.')
@click_log.simple_verbosity_option(LOG, default='INFO')
def evaluate(results_dir, sequence_dirs, out_dir):
    """
    Precision and success curves for each sequence, as a CSV report plus two SVG plots.
    """
    try:
        fps_by_sequence = _read_timings(results_dir)
        results = []
        for directory in sequence_dirs:
            name = os.path.basename(os.path.normpath(directory))
            predicted_path = os.path.join(results_dir, f'{name}.txt')
            if not os.path.isfile(predicted_path):
                raise SequenceParseError(predicted_path, None, "missing tracker results")
            gt_boxes = parse_groundtruth(os.path.join(directory, GROUNDTRUTH_FILENAME))
            results.append(evaluate_sequence(
                name, parse_groundtruth(predicted_path), gt_boxes, fps_by_sequence.get(name, float('nan'))
            ))
        _ensure_dir(out_dir)
        write_report(os.path.join(out_dir, REPORT_FILENAME), results)
        plot_precision(os.path.join(out_dir, PRECISION_PLOT_FILENAME), results)
        plot_success(os.path.join(out_dir, SUCCESS_PLOT_FILENAME), results)
    except HANDLED_ERRORS as exc:
        _fail_exception('eval', exc)
    _log('eval', f'wrote {REPORT_FILENAME} for {len(results)} sequences into {out_dir}')


@cli.command(name='prune-report')
@config_options
@click.option('--out', 'out_path', default=None, help='CSV file for the table; printed when omitted.')
@click_log.simple_verbosity_option(LOG, default='INFO')
def prune_report(config_file, seed, mu, out_path):
    """
    Per-layer channel counts and parameter totals at the configured pruning ratio.
    """
    settings = _settings('prune-report', config_file, seed, mu)
    try:
        rows = benchmark.parameter_table(drmim_config.architecture_from(settings), drmim_config.prune_from(settings))
        if out_path:
            write_table(out_path, PARAMETER_TABLE_HEADER, rows)
    except HANDLED_ERRORS as exc:
        _fail_exception('prune-report', exc)
    if not out_path:
        click.echo(','.join(PARAMETER_TABLE_HEADER))
        for row in rows:
            click.echo(','.join(row))


@cli.command()
@config_options
@click.option('--out', 'out_dir', default='synthetic', show_default=True, help='Parent directory for sequences.')
@click.option('--count', type=click.IntRange(min=1), default=1, show_default=True,
              help='Number of sequences, seeded consecutively from --seed.')
@click_log.simple_verbosity_option(LOG, default='INFO')
def synth(config_file, seed, mu, out_dir, count):
    """
    Write synthetic sequence directories (numbered PPM frames plus groundtruth.txt).
    """
    settings = _settings('synth', config_file, seed, mu)
    try:
        for index in range(count):
            sequence = generate_synthetic(benchmark.synth_config_from(settings, settings['seed'] + index))
            save_sequence(sequence, os.path.join(out_dir, sequence.name))
    except HANDLED_ERRORS as exc:
        _fail_exception('synth', exc)
    _log('synth', f'wrote {count} sequences into {out_dir}')


@cli.command()
@click.option('--with-mi-ordering', is_flag=True, default=False,
              help='Also train critics on correlated Gaussians and check the MI estimates are ordered.')
@click.option('--gradient-seeds', type=click.IntRange(min=1), default=GRADCHECK_SEEDS, show_default=True,
              help='Random instances per differentiable operation.')
@click_log.simple_verbosity_option(LOG, default='INFO')
def selftest(with_mi_ordering, gradient_seeds):
    """
    Finite-difference gradient checks and the built-in invariant suite.
    """
    try:
        results = run_selftest(with_mi_ordering=with_mi_ordering, gradient_seeds=gradient_seeds)
    except HANDLED_ERRORS as exc:
        _fail_exception('selftest', exc)
    failed = [result.name for result in results if not result.passed]
    if failed:
        _fail('selftest', ERR_SELFTEST, f'{len(failed)} of {len(results)} checks failed: {", ".join(failed)}',
              'SelftestFailure')
    _log('selftest', f'all {len(results)} checks passed')


def _experiment_command(kind, run, filename, key):
    def command(config_file, seed, mu, out_dir):
        settings = _settings(kind, config_file, seed, mu)
        try:
            _ensure_dir(out_dir)
            rows = run(settings, out_dir=out_dir)
            path = os.path.join(out_dir, filename)
            write_table(path, (key,) + benchmark.SUMMARY_HEADER, rows)
        except HANDLED_ERRORS as exc:
            _fail_exception(kind, exc)
        _log(kind, f'wrote {len(rows)} rows to {path}')
    return command


@cli.command()
@config_options
@click.option('--out', 'out_dir', default='sweep', show_default=True)
@click_log.simple_verbosity_option(LOG, default='INFO')
def sweep(config_file, seed, mu, out_dir):
    """
    Train and evaluate once per pruning ratio 0.1 .. 0.8 on the synthetic benchmark (--mu is ignored).
    """
    _experiment_command('sweep', benchmark.pruning_sweep, SWEEP_FILENAME, 'mu')(config_file, seed, mu, out_dir)


@cli.command()
@config_options
@click.option('--out', 'out_dir', default='ablation', show_default=True)
@click_log.simple_verbosity_option(LOG, default='INFO')
def ablate(config_file, seed, mu, out_dir):
    """
    Full model vs zero MI/identity weights vs no disentangling module, on the synthetic benchmark.
    """
    _experiment_command('ablate', benchmark.ablation, ABLATION_FILENAME, 'variant')(config_file, seed, mu, out_dir)


if __name__ == '__main__':
    # pylint: disable=no-value-for-parameter
    cli()
