"""
Binary checkpoint files for ModelParams.

Layout: the magic bytes, one format version byte, the 32-byte spec hash, then
one record per tensor: u32 name length, UTF-8 name, u32 rank, rank u64
extents, and the values as float64. All integers and floats are little-endian.
Metadata (pruning ratio, seed, training step) travels as rank-0 records under
the ``meta.`` prefix ahead of the weights.
"""

import logging
import math
import os
import struct
from collections import OrderedDict

import backoff
import numpy as np

from drmim.core import Tensor
from drmim.exception import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointVersionError,
    TruncatedCheckpointError
)
from drmim.model import ArchitectureSpec, ModelParams, PruneConfig, layer_shapes, spec_hash
from drmim.utils import envvar_get_int

LOG = logging.getLogger(__name__)

MAGIC = b'DRMIM1'
FORMAT_VERSION = 1
HASH_LENGTH = 32
META_PREFIX = 'meta.'
META_KEYS = ('mu', 'seed', 'step')

CHECKPOINT_ATTEMPTS_DEFAULT = 4

_U32 = struct.Struct('<I')
_U64 = struct.Struct('<Q')


def _backoff_handler(details):
    """
    Simple logging handler for when a checkpoint write is retried.
    """
    LOG.warning('Retrying checkpoint write in {wait:0.1f} seconds after {tries} tries'.format(**details))


def _giveup_on_permanent_error(exc):
    """
    Retrying cannot help when the path itself is wrong.
    """
    return isinstance(exc, (PermissionError, IsADirectoryError, NotADirectoryError, FileNotFoundError))


def encode_checkpoint(params):
    """
    Serialize ``params`` into checkpoint bytes.
    """
    records = OrderedDict()
    records[META_PREFIX + 'mu'] = np.array(params.mu, dtype='<f8')
    records[META_PREFIX + 'seed'] = np.array(params.seed, dtype='<f8')
    records[META_PREFIX + 'step'] = np.array(params.step, dtype='<f8')
    for name, tensor in params.items():
        records[name] = tensor.data

    chunks = [MAGIC, bytes([FORMAT_VERSION]), params.spec_hash]
    for name, values in records.items():
        encoded_name = name.encode('utf-8')
        chunks.append(_U32.pack(len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(_U32.pack(values.ndim))
        chunks.extend(_U64.pack(extent) for extent in values.shape)
        chunks.append(np.ascontiguousarray(values, dtype='<f8').tobytes())
    return b''.join(chunks)


class _Reader:
    def __init__(self, payload, path):
        self.payload = payload
        self.path = path
        self.offset = 0

    def take(self, count, what):
        end = self.offset + count
        if end > len(self.payload):
            raise TruncatedCheckpointError(
                f"{self.path}: file ends inside {what} at byte {self.offset} (needs {count}, has "
                f"{len(self.payload) - self.offset})"
            )
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    @property
    def remaining(self):
        return len(self.payload) - self.offset

    @property
    def exhausted(self):
        return self.offset >= len(self.payload)


def decode_records(payload, path='<bytes>'):
    """
    Parse checkpoint bytes into (spec hash, ordered name -> array records).
    """
    reader = _Reader(payload, path)
    magic = reader.take(len(MAGIC), 'magic')
    if magic != MAGIC:
        raise CheckpointVersionError(f"{path}: not a checkpoint file (magic {magic!r})")
    version = reader.take(1, 'version')[0]
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {version}")
    digest = reader.take(HASH_LENGTH, 'spec hash')

    records = OrderedDict()
    while not reader.exhausted:
        name_length, = _U32.unpack(reader.take(_U32.size, 'record name length'))
        try:
            name = reader.take(name_length, 'record name').decode('utf-8')
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{path}: record name is not UTF-8 at byte {reader.offset}") from exc
        rank, = _U32.unpack(reader.take(_U32.size, f'rank of {name}'))
        shape = tuple(_U64.unpack(reader.take(_U64.size, f'extents of {name}'))[0] for _ in range(rank))
        count = math.prod(shape)
        if count * 8 > reader.remaining:
            raise TruncatedCheckpointError(
                f"{path}: record {name} declares extents {list(shape)}, more than the {reader.remaining} bytes left"
            )
        values = np.frombuffer(reader.take(count * 8, f'values of {name}'), dtype='<f8')
        if name in records:
            raise CheckpointError(f"{path}: duplicate record {name}")
        records[name] = values.astype(np.float64).reshape(shape)
    return digest, records


def params_from_records(digest, records, spec=None, path='<bytes>'):
    spec = spec if spec is not None else ArchitectureSpec.default()
    missing_meta = [key for key in META_KEYS if META_PREFIX + key not in records]
    if missing_meta:
        raise CheckpointShapeError(f"{path}: missing metadata records {missing_meta}")
    prune = PruneConfig(float(records[META_PREFIX + 'mu']))
    if digest != spec_hash(spec, prune):
        raise CheckpointShapeError(f"{path}: spec hash does not match the configured architecture at mu={prune.mu}")

    expected = layer_shapes(spec, prune)
    weights = OrderedDict((name, values) for name, values in records.items() if not name.startswith(META_PREFIX))
    unexpected = [name for name in weights if name not in expected]
    absent = [name for name in expected if name not in weights]
    if unexpected or absent:
        raise CheckpointShapeError(f"{path}: unexpected records {unexpected}, missing records {absent}")
    for name, shape in expected.items():
        if weights[name].shape != shape:
            raise CheckpointShapeError(
                f"{path}: {name} has shape {list(weights[name].shape)}, expected {list(shape)}"
            )

    tensors = OrderedDict((name, Tensor(values, requires_grad=True)) for name, values in weights.items())
    return ModelParams(
        spec, prune,
        seed=int(records[META_PREFIX + 'seed']),
        tensors=tensors,
        step=int(records[META_PREFIX + 'step']),
    )


def save_checkpoint(params, path):
    """
    Write ``params`` to ``path``, retrying transient OS errors with exponential backoff.
    """
    payload = encode_checkpoint(params)

    @backoff.on_exception(
        backoff.expo,
        OSError,
        max_tries=envvar_get_int('DRMIM_CHECKPOINT_ATTEMPTS', CHECKPOINT_ATTEMPTS_DEFAULT),
        giveup=_giveup_on_permanent_error,
        on_backoff=lambda details: _backoff_handler(details)  # pylint: disable=unnecessary-lambda
    )
    def _write():
        partial_path = f'{path}.partial'
        with open(partial_path, 'wb') as handle:
            handle.write(payload)
        os.replace(partial_path, path)

    _write()
    LOG.info("Wrote checkpoint %s (%d bytes, step %d)", path, len(payload), params.step)
    return len(payload)


def load_checkpoint(path, spec=None):
    """
    Read a checkpoint written for ``spec`` (the default architecture if omitted).
    """
    with open(path, 'rb') as handle:
        payload = handle.read()
    digest, records = decode_records(payload, path)
    params = params_from_records(digest, records, spec, path)
    LOG.info("Loaded checkpoint %s (mu=%s, step %d)", path, params.mu, params.step)
    return params
