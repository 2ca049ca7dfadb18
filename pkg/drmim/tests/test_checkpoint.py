"""
Tests of the binary checkpoint format and the retrying writer.
"""

import os
import struct
import tempfile
import unittest

import numpy as np
from mock import patch

from drmim import checkpoint
from drmim.exception import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointVersionError,
    TruncatedCheckpointError
)
from drmim.selftest import tiny_spec
from drmim.tests.helpers import tiny_model


class CheckpointFormatTest(unittest.TestCase):

    def setUp(self):
        super().setUp()
        self.params = tiny_model(seed=11, mu=0.2)
        self.params.step = 17
        self.payload = checkpoint.encode_checkpoint(self.params)

    def test_header(self):
        self.assertTrue(self.payload.startswith(checkpoint.MAGIC))
        self.assertEqual(self.payload[len(checkpoint.MAGIC)], checkpoint.FORMAT_VERSION)
        start = len(checkpoint.MAGIC) + 1
        self.assertEqual(self.payload[start:start + checkpoint.HASH_LENGTH], self.params.spec_hash)

    def test_metadata_records_lead(self):
        _, records = checkpoint.decode_records(self.payload)
        self.assertEqual(list(records)[:3], ['meta.mu', 'meta.seed', 'meta.step'])
        self.assertEqual(records['meta.step'].shape, ())

    def test_decoded_params_match(self):
        digest, records = checkpoint.decode_records(self.payload)
        restored = checkpoint.params_from_records(digest, records, tiny_spec())
        self.assertEqual((restored.mu, restored.seed, restored.step), (0.2, 11, 17))
        for name, tensor in self.params.items():
            np.testing.assert_array_equal(restored[name].data, tensor.data)
            self.assertTrue(restored[name].requires_grad)

    def test_truncated(self):
        for cut in (3, len(checkpoint.MAGIC) + 10, len(self.payload) - 5):
            with self.assertRaises(TruncatedCheckpointError):
                checkpoint.decode_records(self.payload[:cut])

    def test_bad_magic(self):
        with self.assertRaises(CheckpointVersionError):
            checkpoint.decode_records(b'NOTAMODEL' + self.payload)

    def test_unknown_version(self):
        tampered = bytearray(self.payload)
        tampered[len(checkpoint.MAGIC)] = checkpoint.FORMAT_VERSION + 1
        with self.assertRaises(CheckpointVersionError):
            checkpoint.decode_records(bytes(tampered))

    def test_architecture_mismatch(self):
        digest, records = checkpoint.decode_records(self.payload)
        with self.assertRaises(CheckpointShapeError):
            checkpoint.params_from_records(digest, records, tiny_spec(dr_width=8))

    def test_missing_record(self):
        digest, records = checkpoint.decode_records(self.payload)
        del records['neck_cls_z.0.bias']
        with self.assertRaises(CheckpointShapeError):
            checkpoint.params_from_records(digest, records, tiny_spec())

    def test_duplicate_record(self):
        name = b'meta.mu'
        extra = struct.pack('<I', len(name)) + name + struct.pack('<I', 0) + struct.pack('<d', 0.2)
        with self.assertRaises(CheckpointError):
            checkpoint.decode_records(self.payload + extra)

    def test_oversized_extents(self):
        name = b'meta.mu'
        header = self.payload[:len(checkpoint.MAGIC) + 1 + checkpoint.HASH_LENGTH]
        for extents in ((2 ** 40,), (2 ** 63, 2 ** 63), (2 ** 64 - 1, 3)):
            record = struct.pack('<I', len(name)) + name + struct.pack('<I', len(extents))
            record += b''.join(struct.pack('<Q', extent) for extent in extents) + struct.pack('<d', 0.2)
            with self.assertRaises(TruncatedCheckpointError) as context:
                checkpoint.decode_records(header + record)
            self.assertIn('meta.mu', str(context.exception))


class CheckpointFileTest(unittest.TestCase):

    def setUp(self):
        super().setUp()
        self.directory = tempfile.TemporaryDirectory()
        self.addCleanup(self.directory.cleanup)
        self.path = os.path.join(self.directory.name, 'model.ckpt')

    def test_save_and_load(self):
        params = tiny_model(seed=4)
        size = checkpoint.save_checkpoint(params, self.path)
        self.assertEqual(os.path.getsize(self.path), size)
        self.assertFalse(os.path.exists(self.path + '.partial'))
        restored = checkpoint.load_checkpoint(self.path, tiny_spec())
        np.testing.assert_array_equal(restored['dr_related.1.weight'].data, params['dr_related.1.weight'].data)

    def test_load_with_default_architecture_fails(self):
        checkpoint.save_checkpoint(tiny_model(), self.path)
        with self.assertRaises(CheckpointShapeError):
            checkpoint.load_checkpoint(self.path)

    def test_transient_error_is_retried(self):
        real_replace = os.replace
        calls = []

        def flaky_replace(source, destination):
            calls.append(destination)
            if len(calls) == 1:
                raise OSError('device busy')
            return real_replace(source, destination)

        with patch('drmim.checkpoint.os.replace', side_effect=flaky_replace):
            with self.assertLogs('drmim.checkpoint', 'WARNING'):
                checkpoint.save_checkpoint(tiny_model(), self.path)
        self.assertEqual(len(calls), 2)
        self.assertTrue(os.path.isfile(self.path))

    def test_permanent_error_is_not_retried(self):
        missing = os.path.join(self.directory.name, 'missing', 'model.ckpt')
        with patch('drmim.checkpoint._backoff_handler') as mock_handler:
            with self.assertRaises(FileNotFoundError):
                checkpoint.save_checkpoint(tiny_model(), missing)
        mock_handler.assert_not_called()
