"""Checkpoint files.

Layout::

    b'SLCK' | u32 version | u32 header length | UTF-8 JSON header | RDT1 blocks ...

The header (sorted keys, compact separators) holds the architecture, training stage,
configuration fingerprint, free-form metadata, optimizer hyperparameters and a tensor
directory of ``{name, offset, length}`` entries; offsets count from the first byte after
the header. Tensors are written in sorted name order so a save of a loaded checkpoint
reproduces the file byte for byte.
"""
import json
import struct
import logging
import warnings
from enum import Enum
from dataclasses import dataclass, field
from collections import OrderedDict
from typing import Dict, Iterable, Optional

import numpy as np

from .errors import CheckpointError, ConfigError, DataError, FingerprintWarning
from .file_utils import atomic_write_bytes
from .optimizer import OptimState
from .radar_data import SceneLabel, tensor_from_bytes, tensor_to_bytes
from .slnet_models import ArchSpec, SLNetModel, build

logger = logging.getLogger(__name__)

MAGIC = b'SLCK'
VERSION = 1
_PREFIX = struct.Struct('<4sII')
_MOMENT_PREFIX = ('optim.m:', 'optim.v:')


class Stage(Enum):
    UNIVERSAL = 'universal'
    FINETUNED_STATIC = 'finetuned_static'
    FINETUNED_DYNAMIC = 'finetuned_dynamic'
    CLASSIFIER = 'classifier'

    @classmethod
    def for_scene(cls, scene: SceneLabel) -> 'Stage':
        return cls.FINETUNED_STATIC if scene is SceneLabel.STATIC else cls.FINETUNED_DYNAMIC

    @property
    def is_detector(self) -> bool:
        return self is not Stage.CLASSIFIER


@dataclass(eq=False)
class ModelCheckpoint:
    arch: ArchSpec
    stage: Stage
    tensors: Dict[str, np.ndarray]
    fingerprint: str = ''
    optim: Optional[OptimState] = None
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.stage = Stage(self.stage)
        if self.stage.is_detector != self.arch.is_detector:
            raise CheckpointError(f"stage {self.stage.value} does not fit architecture {self.arch.name}")

    @classmethod
    def from_model(cls, model: SLNetModel, stage: Stage, fingerprint: str = '',
                   optim: Optional[OptimState] = None, metadata: Optional[Dict] = None) -> 'ModelCheckpoint':
        tensors = OrderedDict((name, np.array(value, dtype=np.float32)) for name, value in model.state_arrays().items())
        return cls(model.arch, stage, tensors, fingerprint, optim, dict(metadata or {}))

    def to_model(self) -> SLNetModel:
        model = build(self.arch)
        try:
            model.load_state_arrays(self.tensors)
        except DataError as e:
            raise CheckpointError(f"checkpoint tensors do not match {self.arch.name}: {e}")
        return model


def require_stage(ckpt: ModelCheckpoint, allowed: Iterable[Stage], use: str) -> None:
    allowed = tuple(allowed)
    if ckpt.stage not in allowed:
        raise CheckpointError(f"{use} needs a {' or '.join(s.value for s in allowed)} checkpoint, "
                              f"got {ckpt.stage.value}")


def checkpoint_to_bytes(ckpt: ModelCheckpoint) -> bytes:
    arrays = OrderedDict(sorted(ckpt.tensors.items()))
    optim_header = None
    if ckpt.optim is not None:
        o = ckpt.optim
        optim_header = {'beta1': o.beta1, 'beta2': o.beta2, 'eps': o.eps, 'base_lr': o.base_lr, 'step': o.step}
        for prefix, moments in zip(_MOMENT_PREFIX, (o.first_moment, o.second_moment)):
            for name in sorted(moments):
                arrays[prefix + name] = moments[name]

    blocks, directory, offset = [], [], 0
    for name, value in arrays.items():
        block = tensor_to_bytes(value)
        directory.append({'name': name, 'offset': offset, 'length': len(block)})
        blocks.append(block)
        offset += len(block)

    header = {
        'arch': ckpt.arch.to_dict(),
        'stage': ckpt.stage.value,
        'fingerprint': ckpt.fingerprint,
        'metadata': ckpt.metadata,
        'optim': optim_header,
        'tensors': directory,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    return _PREFIX.pack(MAGIC, VERSION, len(header_bytes)) + header_bytes + b''.join(blocks)


def checkpoint_from_bytes(buffer: bytes, source: str = '<bytes>') -> ModelCheckpoint:
    if len(buffer) < _PREFIX.size:
        raise CheckpointError(f"{source}: truncated checkpoint prefix")
    magic, version, header_len = _PREFIX.unpack_from(buffer, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    data_start = _PREFIX.size + header_len
    if len(buffer) < data_start:
        raise CheckpointError(f"{source}: truncated checkpoint header")
    try:
        header = json.loads(buffer[_PREFIX.size:data_start].decode('utf-8'))
        arch = ArchSpec.from_dict(header['arch'])
        stage = Stage(header['stage'])
        directory = header['tensors']
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{source}: unreadable checkpoint header: {e}")
    except ConfigError as e:
        raise CheckpointError(f"{source}: invalid architecture in header: {e}")

    tensors, first, second = OrderedDict(), {}, {}
    end = data_start
    for entry in directory:
        start = data_start + int(entry['offset'])
        try:
            value, end = tensor_from_bytes(buffer, start)
        except DataError as e:
            raise CheckpointError(f"{source}: tensor {entry['name']}: {e}")
        if end - start != int(entry['length']):
            raise CheckpointError(f"{source}: tensor {entry['name']} length disagrees with the directory")
        name = entry['name']
        if name.startswith(_MOMENT_PREFIX[0]):
            first[name[len(_MOMENT_PREFIX[0]):]] = value
        elif name.startswith(_MOMENT_PREFIX[1]):
            second[name[len(_MOMENT_PREFIX[1]):]] = value
        else:
            tensors[name] = value
    if end != len(buffer):
        raise CheckpointError(f"{source}: {len(buffer) - end} trailing bytes after the last tensor")

    optim = None
    if header.get('optim') is not None:
        o = header['optim']
        optim = OptimState(o['beta1'], o['beta2'], o['eps'], o['base_lr'], int(o['step']), first, second)
    return ModelCheckpoint(arch, stage, tensors, header.get('fingerprint', ''), optim, header.get('metadata', {}))


def save_checkpoint(ckpt: ModelCheckpoint, path: str) -> str:
    payload = checkpoint_to_bytes(ckpt)
    atomic_write_bytes(path, payload)
    logger.info(f"[CKPT] Saved {ckpt.stage.value} {ckpt.arch.name} checkpoint to {path} ({len(payload)} bytes)")
    return path


def load_checkpoint(path: str, expected_fingerprint: Optional[str] = None) -> ModelCheckpoint:
    """Reads a checkpoint; a fingerprint different from the expected one only warns."""
    try:
        with open(path, 'rb') as f:
            buffer = f.read()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}")
    ckpt = checkpoint_from_bytes(buffer, path)
    if expected_fingerprint is not None and ckpt.fingerprint != expected_fingerprint:
        message = (f"checkpoint {path} was written under configuration {ckpt.fingerprint[:12] or '<none>'}, "
                   f"current configuration is {expected_fingerprint[:12]}")
        logger.warning(f"[CKPT] {message}")
        warnings.warn(message, FingerprintWarning, stacklevel=2)
    logger.debug(f"[CKPT] Loaded {ckpt.stage.value} {ckpt.arch.name} from {path}")
    return ckpt
