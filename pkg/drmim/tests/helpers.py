"""
Shared fixtures for drmim tests: a tiny architecture, tiny synthetic sequences and config files.
"""

import io
import unittest

import yaml

from drmim import model
from drmim.data import SynthConfig, generate_synthetic
from drmim.selftest import tiny_spec
from drmim.utils import envvar_get_bool

RUN_SLOW = envvar_get_bool('DRMIM_RUN_SLOW')
slow = unittest.skipUnless(RUN_SLOW, 'set DRMIM_RUN_SLOW=1 to run end-to-end checks')

# Settings that select the tiny architecture through the config layer.
TINY_SETTINGS = {
    'template_size': 64,
    'search_size': 128,
    'backbone_widths': [4, 6, 8, 8, 6],
    'dr_width': 6,
    'neck_width': 6,
    'neck_kernel': 1,
    'head_width': 6,
    'head_depth': 1,
    'disc_width': 8,
}


def tiny_model(seed=0, mu=0.0, **overrides):
    return model.build_model(tiny_spec(**overrides), model.PruneConfig(mu), seed)


def tiny_synth_config(seed=0, length=8):
    return SynthConfig(
        canvas_width=160, canvas_height=120, object_size_range=(20, 28), clutter=4, seed=seed, length=length
    )


def tiny_sequence(seed=0, length=8):
    return generate_synthetic(tiny_synth_config(seed, length))


def fake_config_file(filename, **values):
    """
    Write a YAML config holding the tiny architecture plus ``values``.
    """
    settings = dict(TINY_SETTINGS)
    settings.update(values)
    with io.open(filename, 'w', encoding='utf-8') as config_file:
        yaml.safe_dump(settings, config_file)
    return filename
