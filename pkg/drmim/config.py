"""
Flat run configuration shared by every command.

A config file is either a YAML mapping or plain ``key=value`` lines; both
produce the same flat mapping. Unknown keys are rejected.
"""

import io
import logging
from collections import OrderedDict

import yaml

from drmim.exception import ConfigurationError
from drmim.loss import LossWeights
from drmim.model import ArchitectureSpec, PruneConfig
from drmim.tracker import TrackerConfig
from drmim.trainer import TrainConfig

LOG = logging.getLogger(__name__)

DEFAULTS = OrderedDict([
    # Training.
    ('mu', 0.0),
    ('lr', 1e-2),
    ('momentum', 0.9),
    ('weight_decay', 1e-4),
    ('grad_clip', 10.0),
    ('batch', 8),
    ('steps', 200),
    ('seed', 0),
    ('checkpoint_every', 0),
    ('log_wall_time', True),
    # Loss weights.
    ('rho', 0.05),
    ('gamma', 0.05),
    ('omega', 0.05),
    ('lambda1', 1.0),
    ('lambda2', 3.0),
    ('focal_alpha', 0.25),
    ('focal_gamma', 2.0),
    # Architecture.
    ('template_size', 96),
    ('search_size', 256),
    ('backbone_widths', (32, 64, 96, 96, 64)),
    ('backbone_kernels', (5, 3, 3, 3, 3)),
    ('backbone_strides', (2, 2, 2, 1, 1)),
    ('dr_width', 64),
    ('neck_width', 64),
    ('neck_kernel', 3),
    ('head_width', 64),
    ('head_depth', 2),
    ('disc_width', 64),
    ('use_dr', True),
    # Sampling.
    ('max_gap', 30),
    ('max_shift', 16),
    ('context_amount', 0.5),
    # Tracking.
    ('window_influence', 0.3),
    ('size_lr', 0.6),
    ('penalty_k', 0.04),
    # Synthetic benchmark.
    ('train_sequences', 20),
    ('eval_sequences', 5),
    ('sequence_length', 60),
])


def _coerce(key, value):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                lowered = value.strip().lower()
                if lowered not in ('1', '0', 'true', 'false', 'yes', 'no'):
                    raise ValueError(value)
                return lowered in ('1', 'true', 'yes')
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            if isinstance(value, str):
                value = [item for item in value.replace(' ', '').split(',') if item]
            if isinstance(value, int):
                value = [value]
            return tuple(int(item) for item in value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"Config key {key} expects a {type(default).__name__}, got {value!r}") from None
    return value


def _parse_key_value_lines(text, source):
    values = OrderedDict()
    for line_number, line in enumerate(text.splitlines(), start=1):
        stripped = line.split('#', 1)[0].strip()
        if not stripped:
            continue
        if '=' not in stripped:
            raise ConfigurationError(f"{source}:{line_number}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in stripped.split('=', 1))
        values[key] = yaml.safe_load(raw) if raw else ''
    return values


def parse_config_text(text, source='<config>'):
    try:
        loaded = yaml.safe_load(text)
    except yaml.YAMLError:
        loaded = None
    if isinstance(loaded, dict):
        return OrderedDict(loaded)
    if loaded is None and not text.strip():
        return OrderedDict()
    return _parse_key_value_lines(text, source)


def build_settings(values=None, overrides=None):
    """
    Defaults, then file values, then non-None overrides. Every key is validated and typed.
    """
    settings = OrderedDict(DEFAULTS)
    for source in (values or {}, {k: v for k, v in (overrides or {}).items() if v is not None}):
        for key, value in source.items():
            if key not in DEFAULTS:
                raise ConfigurationError(f"Unknown config key {key!r}")
            settings[key] = _coerce(key, value)
    return settings


def load_config(path=None, overrides=None):
    values = None
    if path is not None:
        try:
            with io.open(path, 'r', encoding='utf-8') as handle:
                text = handle.read()
        except OSError as exc:
            raise ConfigurationError(f"Failed to read config file {path}: {exc}") from exc
        values = parse_config_text(text, path)
        LOG.debug("Read %d config values from %s", len(values), path)
    return build_settings(values, overrides)


def architecture_from(settings):
    return ArchitectureSpec(
        template_size=settings['template_size'],
        search_size=settings['search_size'],
        backbone_widths=settings['backbone_widths'],
        backbone_kernels=settings['backbone_kernels'],
        backbone_strides=settings['backbone_strides'],
        dr_width=settings['dr_width'],
        neck_width=settings['neck_width'],
        neck_kernel=settings['neck_kernel'],
        head_width=settings['head_width'],
        head_depth=settings['head_depth'],
        disc_width=settings['disc_width'],
        use_dr=settings['use_dr'],
    )


def prune_from(settings):
    return PruneConfig(settings['mu'])


def loss_weights_from(settings):
    return LossWeights(
        rho=settings['rho'],
        gamma=settings['gamma'],
        omega=settings['omega'],
        lambda1=settings['lambda1'],
        lambda2=settings['lambda2'],
        focal_alpha=settings['focal_alpha'],
        focal_gamma=settings['focal_gamma'],
    )


def tracker_config_from(settings):
    return TrackerConfig(
        window_influence=settings['window_influence'],
        size_lr=settings['size_lr'],
        penalty_k=settings['penalty_k'],
        context_amount=settings['context_amount'],
    )


def train_config_from(settings, checkpoint_path=None, log_path=None):
    return TrainConfig(
        lr=settings['lr'],
        momentum=settings['momentum'],
        weight_decay=settings['weight_decay'],
        grad_clip=settings['grad_clip'],
        batch=settings['batch'],
        steps=settings['steps'],
        seed=settings['seed'],
        weights=loss_weights_from(settings),
        prune=prune_from(settings),
        checkpoint_path=checkpoint_path,
        log_path=log_path,
        checkpoint_every=settings['checkpoint_every'],
        log_wall_time=settings['log_wall_time'],
        max_gap=settings['max_gap'],
        max_shift=settings['max_shift'],
        context_amount=settings['context_amount'],
    )
