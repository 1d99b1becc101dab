# This work is marked with CC0 1.0 Universal.
# To view a copy of this license, visit https://creativecommons.org/publicdomain/zero/1.0/
"""
Binary checkpoint files.

Layout, all integers little-endian:

* magic ``FPCK``, format version (u32);
* parameter section: count (u32), then per tensor the name length (u16), the UTF-8 name, the rank (u8), each
  dimension (u32) and the float32 payload;
* optimizer section in the same scheme;
* 16 bytes of random state: seed (u64), stage (u32), completed epochs (u32).

Values are stored as float32, so a network trained in float32 reloads bit for bit.
"""

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from fewpoint.errors import CheckpointError
from fewpoint.layers import Module
from fewpoint.tool import create_parent

logger = logging.getLogger(__name__)

MAGIC = b'FPCK'
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """
    Properties
    ----------

    parameters: Network parameters by dotted name (``encoder.pn_branch.mlp.layer0.weight``...).
    optimizer: Optimizer moments and step counters by name.
    seed: Training seed.
    stage: Last training stage run, 0 for an untrained network.
    epoch: Epochs completed in that stage.
    """

    parameters: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    seed: int = 0
    stage: int = 0
    epoch: int = 0

    @classmethod
    def of(cls, network: Module, optimizer: dict[str, np.ndarray] | None = None, seed: int = 0, stage: int = 0,
           epoch: int = 0) -> 'Checkpoint':
        return cls(network.state_dict(), dict(optimizer or {}), seed, stage, epoch)

    def restore(self, network: Module) -> None:
        network.load_state_dict(self.parameters)


def _write_section(out: bytearray, tensors: dict[str, np.ndarray]) -> None:
    out += struct.pack('<I', len(tensors))
    for name, value in tensors.items():
        encoded = name.encode('utf-8')
        value = np.asarray(value)
        out += struct.pack('<H', len(encoded)) + encoded
        out += struct.pack('<B', value.ndim)
        out += struct.pack(f'<{value.ndim}I', *value.shape)
        out += np.ascontiguousarray(value, dtype='<f4').tobytes()


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack('<I', FORMAT_VERSION)
    _write_section(out, checkpoint.parameters)
    _write_section(out, checkpoint.optimizer)
    out += struct.pack('<QII', checkpoint.seed, checkpoint.stage, checkpoint.epoch)
    return bytes(out)


class _Reader:

    def __init__(self, data: bytes, path: str):
        self.data = data
        self.path = path
        self.offset = 0

    def read(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint at byte {self.offset}")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))

    def section(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack('<I')
        tensors = {}
        for _ in range(count):
            (length,) = self.unpack('<H')
            try:
                name = self.read(length).decode('utf-8')
            except UnicodeDecodeError as e:
                raise CheckpointError(f"{self.path}: bad tensor name: {e}") from e
            if name in tensors:
                raise CheckpointError(f"{self.path}: duplicate tensor name {name}")
            (rank,) = self.unpack('<B')
            shape = self.unpack(f'<{rank}I')
            size = int(np.prod(shape, dtype=np.int64))
            tensors[name] = np.frombuffer(self.read(4 * size), dtype='<f4').reshape(shape).astype(np.float32)
        return tensors


def decode_checkpoint(data: bytes, path: str = '<bytes>') -> Checkpoint:
    reader = _Reader(data, path)
    if reader.read(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = reader.unpack('<I')
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    parameters = reader.section()
    optimizer = reader.section()
    seed, stage, epoch = reader.unpack('<QII')
    if reader.offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - reader.offset} trailing bytes")
    return Checkpoint(parameters, optimizer, seed, stage, epoch)


def save_checkpoint(checkpoint: Checkpoint, path: str) -> None:
    create_parent(path)
    with open(path, 'wb') as f:
        f.write(encode_checkpoint(checkpoint))
    logger.info(f"checkpoint_saved path={path} stage={checkpoint.stage} epoch={checkpoint.epoch} "
                f"tensors={len(checkpoint.parameters)}")


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, 'rb') as f:
        return decode_checkpoint(f.read(), path)
