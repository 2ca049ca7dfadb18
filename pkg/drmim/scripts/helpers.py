"""
Common helper methods to use in drmim commands.
"""

import sys

import click

from drmim import config as drmim_config
from drmim.exception import (
    CheckpointError,
    ConfigurationError,
    ContractError,
    DimensionError,
    DomainError,
    LossIdentityError,
    NonFiniteLossError,
    SequenceParseError,
    TrainingIOError
)

# Exit codes, one per failure family. Zero is success and 2 is click's usage error.
ERR_CONFIG = 3
ERR_CHECKPOINT = 4
ERR_SEQUENCE = 5
ERR_TRAINING = 6
ERR_CONTRACT = 7
ERR_SELFTEST = 8
ERR_IO = 9
ERR_UNKNOWN = 10

EXIT_CODES = (
    (ConfigurationError, ERR_CONFIG),
    (CheckpointError, ERR_CHECKPOINT),
    (SequenceParseError, ERR_SEQUENCE),
    (NonFiniteLossError, ERR_TRAINING),
    (LossIdentityError, ERR_TRAINING),
    (TrainingIOError, ERR_TRAINING),
    (DimensionError, ERR_CONTRACT),
    (DomainError, ERR_CONTRACT),
    (ContractError, ERR_CONTRACT),
    (OSError, ERR_IO),
)


def _one_line(text):
    return ' '.join(str(text).split())


def _log(kind, message):
    """
    Convenience method to log text. Prepended "kind" text makes finding log entries easier.
    """
    click.echo(f'{kind}: {message}')


def _fail(kind, code, message, error_type='Error'):
    """
    Write a single machine-parseable error line to stderr and exit with ``code``.
    """
    click.echo(f'drmim {kind} error={code} type={error_type} message={_one_line(message)}', err=True)
    sys.exit(code)


def _exit_code_for(exc):
    for exc_class, code in EXIT_CODES:
        if isinstance(exc, exc_class):
            return code
    return ERR_UNKNOWN


def _fail_exception(kind, exc, code=None):
    """
    A version of fail that derives the exit code and type from an exception.
    """
    _fail(kind, code if code is not None else _exit_code_for(exc), str(exc) or repr(exc), type(exc).__name__)


def _config_or_exit(fail_func, config_file, overrides=None):
    """
    Returns the flat settings from the given file, with passed in values overriding it.
    """
    try:
        return drmim_config.load_config(config_file, overrides)
    except ConfigurationError as exc:
        fail_func(exc)
