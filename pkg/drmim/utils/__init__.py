"""
Initialization code for the utils module.
"""


import os

# How often (in steps) the trainer emits an INFO summary line.
LOG_EVERY = int(os.environ.get("DRMIM_LOG_EVERY", 10))

# Number of random instances each gradient check is run over.
GRADCHECK_SEEDS = int(os.environ.get("DRMIM_GRADCHECK_SEEDS", 20))


def envvar_get_int(var_name, default):
    """
    Grab an environment variable and return it as an integer.
    If the environment variable does not exist, return the default.
    """
    return int(os.environ.get(var_name, default))


def envvar_get_bool(var_name, default=False):
    """
    Grab an environment variable and interpret it as a flag ("1", "true", "yes" are true).
    """
    value = os.environ.get(var_name)
    if value is None:
        return default
    return value.strip().lower() in ("1", "true", "yes")
