"""
Desk-scale experiments on the synthetic benchmark: train on one set of
seeded sequences, run one-pass evaluation on a held-out set.
"""

import logging
import os
from drmim import config as drmim_config
from drmim import model
from drmim.data import SynthConfig, generate_synthetic
from drmim.evaluation import evaluate_sequence, overall_result
from drmim.tracker import track_sequence
from drmim.trainer import train

LOG = logging.getLogger(__name__)

# Held-out sequences draw seeds from a disjoint range.
TRAIN_SEED_BASE = 1000
EVAL_SEED_BASE = 9000
SWEEP_RATIOS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
SUMMARY_HEADER = ('params', 'precision20', 'auc', 'fps')


def synth_config_from(settings, seed):
    return SynthConfig(seed=seed, length=settings['sequence_length'])


def synthetic_sequences(settings, count, seed_base):
    base = seed_base + settings['seed'] * 100
    return [generate_synthetic(synth_config_from(settings, base + index)) for index in range(count)]


def synthetic_benchmark(settings):
    return (
        synthetic_sequences(settings, settings['train_sequences'], TRAIN_SEED_BASE),
        synthetic_sequences(settings, settings['eval_sequences'], EVAL_SEED_BASE),
    )


def evaluate_params(params, sequences, tracker_config):
    results = []
    for sequence in sequences:
        tracked = track_sequence(params, sequence, tracker_config)
        results.append(evaluate_sequence(sequence.name, tracked.boxes, sequence.boxes, tracked.fps))
    return results


def run_experiment(settings, train_sequences, eval_sequences, out_dir=None, label='run'):
    """
    Train with ``settings`` and evaluate. Returns (params, overall EvalResult).
    """
    checkpoint_path = log_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        checkpoint_path = os.path.join(out_dir, f'{label}.ckpt')
        log_path = os.path.join(out_dir, f'{label}_train_log.csv')
    spec = drmim_config.architecture_from(settings)
    train_config = drmim_config.train_config_from(settings, checkpoint_path, log_path)
    params, _ = train(train_config, train_sequences, spec=spec)
    results = evaluate_params(params, eval_sequences, drmim_config.tracker_config_from(settings))
    summary = overall_result(results)
    LOG.info("%s: %d params, precision@20 %.3f, AUC %.3f, %.1f FPS",
             label, params.parameter_count(), summary.precision20, summary.auc, summary.fps)
    return params, summary


def summary_row(key, params, summary):
    return [key, str(params.parameter_count()), f'{summary.precision20:.6f}', f'{summary.auc:.6f}',
            f'{summary.fps:.3f}']


def pruning_sweep(settings, ratios=None, out_dir=None):
    """
    One training/evaluation run per pruning ratio, SWEEP_RATIOS unless given;
    rows of "mu,params,precision20,auc,fps".
    """
    ratios = SWEEP_RATIOS if ratios is None else ratios
    train_sequences, eval_sequences = synthetic_benchmark(settings)
    rows = []
    for mu in ratios:
        run_settings = drmim_config.build_settings(settings, {'mu': mu})
        params, summary = run_experiment(run_settings, train_sequences, eval_sequences, out_dir, f'mu{mu:.2f}')
        rows.append(summary_row(f'{mu:g}', params, summary))
    return rows


ABLATION_VARIANTS = (
    ('dr_mim', {}),
    ('no_mi_idsim', {'rho': 0.0, 'gamma': 0.0, 'omega': 0.0}),
    ('baseline', {'use_dr': False}),
)


def ablation(settings, out_dir=None):
    """
    Full model vs zeroed MI/identity weights vs no disentangling module; rows of "variant,params,...".
    """
    train_sequences, eval_sequences = synthetic_benchmark(settings)
    rows = []
    for variant, overrides in ABLATION_VARIANTS:
        run_settings = drmim_config.build_settings(settings, overrides)
        params, summary = run_experiment(run_settings, train_sequences, eval_sequences, out_dir, variant)
        rows.append(summary_row(variant, params, summary))
    return rows


def parameter_table(spec, prune):
    """
    Rows of (layer, in, out, kernel, params) plus network and discriminator totals.
    """
    rows = []
    for layer in model.plan_layers(spec, prune):
        rows.append([layer.name, str(layer.in_channels), str(layer.out_channels), str(layer.kernel),
                     str(layer.parameter_count)])
    network = model.parameter_count(spec, prune)
    everything = model.parameter_count(spec, prune, include_discriminators=True)
    rows.append(['total_network', '', '', '', str(network)])
    rows.append(['total_with_discriminators', '', '', '', str(everything)])
    return rows
