import struct

import numpy as np
import pytest

from fewpoint.checkpoint import (FORMAT_VERSION, MAGIC, Checkpoint, decode_checkpoint, encode_checkpoint,
                                 load_checkpoint, save_checkpoint)
from fewpoint.errors import CheckpointError
from fewpoint.layers import parameter_hash
from fewpoint.network import BASELINE, Variant
from tests.helpers import tiny_network


@pytest.fixture
def checkpoint():
    return Checkpoint({'a.weight': np.arange(6, dtype=np.float32).reshape(2, 3), 'a.bias': np.float32([0.5])},
                      {'adam.model.step': np.array(3, dtype=np.float32)}, seed=42, stage=2, epoch=7)


def test_layout(checkpoint):
    data = encode_checkpoint(checkpoint)
    assert data[:4] == MAGIC
    assert struct.unpack('<I', data[4:8]) == (FORMAT_VERSION,)
    assert struct.unpack('<QII', data[-16:]) == (42, 2, 7)
    (count,) = struct.unpack('<I', data[8:12])
    assert count == 2
    (length,) = struct.unpack('<H', data[12:14])
    assert data[14:14 + length] == b'a.weight'


def test_decode(checkpoint):
    decoded = decode_checkpoint(encode_checkpoint(checkpoint))
    assert list(decoded.parameters) == ['a.weight', 'a.bias']
    np.testing.assert_array_equal(decoded.parameters['a.weight'], checkpoint.parameters['a.weight'])
    assert decoded.optimizer['adam.model.step'].shape == ()
    assert (decoded.seed, decoded.stage, decoded.epoch) == (42, 2, 7)


def test_bad_magic(checkpoint):
    data = b'XXXX' + encode_checkpoint(checkpoint)[4:]
    with pytest.raises(CheckpointError, match='magic'):
        decode_checkpoint(data)


def test_bad_version(checkpoint):
    data = encode_checkpoint(checkpoint)
    with pytest.raises(CheckpointError, match='version'):
        decode_checkpoint(data[:4] + struct.pack('<I', FORMAT_VERSION + 1) + data[8:])


@pytest.mark.parametrize('cut', [3, 10, 20, 40])
def test_truncated(checkpoint, cut):
    data = encode_checkpoint(checkpoint)
    with pytest.raises(CheckpointError):
        decode_checkpoint(data[:-cut])


def test_trailing_bytes(checkpoint):
    with pytest.raises(CheckpointError, match='trailing'):
        decode_checkpoint(encode_checkpoint(checkpoint) + b'\0')


def test_duplicate_names():
    data = encode_checkpoint(Checkpoint({'a': np.float32([1.0])}))
    # the single entry of the parameter section, written twice
    entry = data[12:12 + 2 + 1 + 1 + 4 + 4]
    forged = data[:8] + struct.pack('<I', 2) + entry + entry + data[12 + len(entry):]
    with pytest.raises(CheckpointError, match='duplicate'):
        decode_checkpoint(forged)


@pytest.mark.parametrize('variant', [Variant(), BASELINE], ids=lambda v: v.name)
def test_network_reloads_bit_for_bit(tmp_path, variant):
    network = tiny_network(variant, seed=1, dtype=np.float32)
    path = str(tmp_path / 'model' / 'stage1.fpck')
    save_checkpoint(Checkpoint.of(network, seed=1, stage=1, epoch=5), path)
    other = tiny_network(variant, seed=2, dtype=np.float32)
    loaded = load_checkpoint(path)
    loaded.restore(other)
    assert parameter_hash(other) == parameter_hash(network)
    assert Variant.of_parameters(loaded.parameters) == variant


def test_restore_into_another_variant(tmp_path):
    path = str(tmp_path / 'full.fpck')
    save_checkpoint(Checkpoint.of(tiny_network(Variant(), dtype=np.float32)), path)
    with pytest.raises(CheckpointError, match='unknown parameter names'):
        load_checkpoint(path).restore(tiny_network(BASELINE, dtype=np.float32))
