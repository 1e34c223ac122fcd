"""Radar sequence, snippet, annotation and ConfMap types plus the on-disk dataset format.

A sequence directory holds three files:

    frames.rdt        RDT1 tensor of shape (T, C_RF, W, H)
    meta.json         sidecar: sequence_id, scene, grid_size, num_frames, classes
    annotations.csv   optional, header ``frame,class,range,azimuth``

Array layout everywhere is ``[..., azimuth, range]``: W indexes azimuth, H indexes range.
"""
import os
import io
import csv
import json
import struct
import logging
from enum import Enum
from dataclasses import dataclass
from typing import List, Optional, Tuple, Sequence, Dict

import numpy as np
from natsort import natsorted

from .errors import DataError, ShapeError
from .file_utils import atomic_write_bytes, atomic_write_text

logger = logging.getLogger(__name__)

DEFAULT_CLASSES = ('pedestrian', 'cyclist', 'car')
NUM_RF_CHANNELS = 2

RDT_MAGIC = b'RDT1'
FRAMES_FILE = 'frames.rdt'
SIDECAR_FILE = 'meta.json'
ANNOTATIONS_FILE = 'annotations.csv'
ANNOTATION_HEADER = ['frame', 'class', 'range', 'azimuth']


class SceneLabel(Enum):
    STATIC = 'static'
    DYNAMIC = 'dynamic'

    @classmethod
    def parse(cls, value: Optional[str]) -> Optional['SceneLabel']:
        """Maps a sidecar/CLI string to a label; None and 'unknown' mean Unknown."""
        if value is None or isinstance(value, cls):
            return value
        text = str(value).strip().lower()
        if text in ('', 'unknown', 'auto'):
            return None
        try:
            return cls(text)
        except ValueError:
            raise DataError(f"Unknown scene label: {value!r}")


def _frozen_float_array(data, name: str) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class RadarFrame:
    data: np.ndarray
    frame_index: int

    def __post_init__(self):
        arr = _frozen_float_array(self.data, 'RadarFrame')
        if arr.ndim != 3 or arr.shape[0] != NUM_RF_CHANNELS:
            raise ShapeError(f"RadarFrame expects ({NUM_RF_CHANNELS}, W, H), got {arr.shape}")
        if arr.shape[1] != arr.shape[2]:
            raise ShapeError(f"RadarFrame grid must be square, got {arr.shape[1:]}")
        if self.frame_index < 0:
            raise DataError(f"frame_index must be non-negative, got {self.frame_index}")
        object.__setattr__(self, 'data', arr)

    @property
    def grid_size(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class RadarSequence:
    frames: Tuple[RadarFrame, ...]
    scene: Optional[SceneLabel]
    sequence_id: str
    classes: Tuple[str, ...] = DEFAULT_CLASSES

    def __post_init__(self):
        frames = tuple(self.frames)
        for expected, frame in enumerate(frames):
            if frame.frame_index != expected:
                raise DataError(f"Sequence {self.sequence_id}: frame indices must be contiguous from 0 "
                                f"(position {expected} holds index {frame.frame_index})")
        shapes = {frame.data.shape for frame in frames}
        if len(shapes) > 1:
            raise ShapeError(f"Sequence {self.sequence_id}: inconsistent frame shapes {sorted(shapes)}")
        object.__setattr__(self, 'frames', frames)
        object.__setattr__(self, 'classes', tuple(self.classes))
        object.__setattr__(self, 'scene', SceneLabel.parse(self.scene))

    @classmethod
    def from_array(cls, data: np.ndarray, scene: Optional[SceneLabel], sequence_id: str,
                   classes: Sequence[str] = DEFAULT_CLASSES) -> 'RadarSequence':
        """Builds a sequence from a (T, C_RF, W, H) array."""
        if data.ndim != 4:
            raise ShapeError(f"Expected (T, C_RF, W, H), got {data.shape}")
        frames = tuple(RadarFrame(data[t], t) for t in range(data.shape[0]))
        return cls(frames, scene, sequence_id, tuple(classes))

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def grid_size(self) -> int:
        return self.frames[0].grid_size if self.frames else 0

    def to_array(self) -> np.ndarray:
        """Stacks frames into (C_RF, T, W, H), the snippet layout."""
        return np.stack([frame.data for frame in self.frames], axis=1)


@dataclass(frozen=True, eq=False)
class RadarSnippet:
    data: np.ndarray
    source_sequence: str
    start_frame: int
    scene: Optional[SceneLabel]

    def __post_init__(self):
        arr = _frozen_float_array(self.data, 'RadarSnippet')
        if arr.ndim != 4 or arr.shape[1] < 1:
            raise ShapeError(f"RadarSnippet expects (C_RF, T, W, H) with T >= 1, got {arr.shape}")
        object.__setattr__(self, 'data', arr)
        object.__setattr__(self, 'scene', SceneLabel.parse(self.scene))

    @property
    def window(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class ObjectAnnotation:
    frame_index: int
    class_id: int
    range_idx: int
    azimuth_idx: int

    def validate(self, grid_size: int, num_classes: int, num_frames: Optional[int] = None) -> None:
        if not 0 <= self.class_id < num_classes:
            raise DataError(f"class {self.class_id} outside [0, {num_classes})")
        if not 0 <= self.range_idx < grid_size or not 0 <= self.azimuth_idx < grid_size:
            raise DataError(f"annotation ({self.range_idx}, {self.azimuth_idx}) outside grid of size {grid_size}")
        if self.frame_index < 0 or (num_frames is not None and self.frame_index >= num_frames):
            raise DataError(f"annotation frame {self.frame_index} outside sequence of {num_frames} frames")


@dataclass(frozen=True)
class Detection:
    frame_index: int
    class_id: int
    range_idx: int
    azimuth_idx: int
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise DataError(f"Detection confidence {self.confidence} outside [0, 1]")

    def sort_key(self):
        """Descending confidence, ties broken by (class, range, azimuth)."""
        return (-self.confidence, self.class_id, self.range_idx, self.azimuth_idx)


@dataclass(frozen=True, eq=False)
class ConfMap:
    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"ConfMap expects (C_cls, T, W, H), got {arr.shape}")
        if not np.all(np.isfinite(arr)) or arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
            raise DataError("ConfMap values must lie in [0, 1]")
        arr.flags.writeable = False
        object.__setattr__(self, 'data', arr)

    @property
    def num_classes(self) -> int:
        return self.data.shape[0]

    @property
    def window(self) -> int:
        return self.data.shape[1]


# ---------------------------------------------------------------------------
# RDT1 tensor codec

def tensor_to_bytes(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array, dtype='<f4')
    header = struct.pack('<4sI', RDT_MAGIC, arr.ndim) + struct.pack(f'<{arr.ndim}I', *arr.shape)
    return header + arr.tobytes(order='C')


def tensor_from_bytes(buffer: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Decodes one RDT1 block starting at offset; returns (array, offset after the block)."""
    if len(buffer) < offset + 8:
        raise DataError("Truncated RDT1 header")
    magic, rank = struct.unpack_from('<4sI', buffer, offset)
    if magic != RDT_MAGIC:
        raise DataError(f"Bad RDT1 magic: {magic!r}")
    offset += 8
    if len(buffer) < offset + 4 * rank:
        raise DataError("Truncated RDT1 dims")
    dims = struct.unpack_from(f'<{rank}I', buffer, offset)
    offset += 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    end = offset + 4 * count
    if len(buffer) < end:
        raise DataError(f"Truncated RDT1 payload: expected {4 * count} bytes, found {len(buffer) - offset}")
    arr = np.frombuffer(buffer, dtype='<f4', count=count, offset=offset).reshape(dims).astype(np.float32)
    return arr, end


def write_tensor(path: str, array: np.ndarray) -> str:
    return atomic_write_bytes(path, tensor_to_bytes(array))


def read_tensor(path: str) -> np.ndarray:
    with open(path, 'rb') as f:
        buffer = f.read()
    arr, end = tensor_from_bytes(buffer)
    if end != len(buffer):
        raise DataError(f"Trailing bytes after RDT1 payload in {path}")
    return arr


# ---------------------------------------------------------------------------
# Sequence directories

def write_annotations_csv(path: str, annotations: Sequence[ObjectAnnotation]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(ANNOTATION_HEADER)
    for ann in sorted(annotations, key=lambda a: (a.frame_index, a.class_id, a.range_idx, a.azimuth_idx)):
        writer.writerow([ann.frame_index, ann.class_id, ann.range_idx, ann.azimuth_idx])
    return atomic_write_text(path, buf.getvalue())


def read_annotations_csv(path: str, grid_size: int, num_classes: int,
                         num_frames: Optional[int] = None) -> List[ObjectAnnotation]:
    annotations = []
    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or [name.strip() for name in reader.fieldnames] != ANNOTATION_HEADER:
            raise DataError(f"Annotation CSV {path} must have header {','.join(ANNOTATION_HEADER)}")
        for line_no, row in enumerate(reader, start=2):
            try:
                ann = ObjectAnnotation(int(row['frame']), int(row['class']), int(row['range']), int(row['azimuth']))
            except (TypeError, ValueError) as e:
                raise DataError(f"{path}:{line_no}: unparsable annotation row {row}: {e}")
            try:
                ann.validate(grid_size, num_classes, num_frames)
            except DataError as e:
                raise DataError(f"{path}:{line_no}: {e}")
            annotations.append(ann)
    return annotations


def write_sequence(seq: RadarSequence, path: str,
                   annotations: Optional[Sequence[ObjectAnnotation]] = None) -> str:
    """Writes frames, sidecar and (optionally) annotations into the directory path."""
    if seq.num_frames == 0:
        raise DataError(f"Sequence {seq.sequence_id} is empty")
    shapes = {frame.data.shape for frame in seq.frames}
    if len(shapes) != 1:
        raise ShapeError(f"Sequence {seq.sequence_id}: inconsistent frame shapes {sorted(shapes)}")

    os.makedirs(path, exist_ok=True)
    stacked = np.stack([frame.data for frame in seq.frames], axis=0)
    write_tensor(os.path.join(path, FRAMES_FILE), stacked)

    sidecar = {
        'sequence_id': seq.sequence_id,
        'grid_size': seq.grid_size,
        'num_frames': seq.num_frames,
        'classes': list(seq.classes),
    }
    if seq.scene is not None:
        sidecar['scene'] = seq.scene.value
    atomic_write_text(os.path.join(path, SIDECAR_FILE), json.dumps(sidecar, indent=2, sort_keys=True) + '\n')

    if annotations is not None:
        for ann in annotations:
            ann.validate(seq.grid_size, len(seq.classes), seq.num_frames)
        write_annotations_csv(os.path.join(path, ANNOTATIONS_FILE), annotations)

    logger.info(f"[DATA] Wrote sequence {seq.sequence_id} ({seq.num_frames} frames, "
                f"scene={seq.scene.value if seq.scene else 'unknown'}) to {path}")
    return path


def read_sidecar(path: str) -> Dict:
    sidecar_path = os.path.join(path, SIDECAR_FILE)
    try:
        with open(sidecar_path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"Sidecar {sidecar_path} is not valid JSON: {e}")


def read_sequence(path: str) -> Tuple[RadarSequence, Optional[List[ObjectAnnotation]]]:
    """Reads a sequence directory; annotations are None when no CSV is present."""
    sidecar = read_sidecar(path)
    frames = read_tensor(os.path.join(path, FRAMES_FILE))
    if frames.ndim != 4:
        raise ShapeError(f"{path}: frames tensor must be (T, C_RF, W, H), got {frames.shape}")

    num_frames = int(sidecar.get('num_frames', frames.shape[0]))
    grid_size = int(sidecar.get('grid_size', frames.shape[-1]))
    if frames.shape[0] != num_frames or frames.shape[2] != grid_size or frames.shape[3] != grid_size:
        raise ShapeError(f"{path}: frames tensor {frames.shape} disagrees with sidecar "
                         f"(num_frames={num_frames}, grid_size={grid_size})")

    classes = tuple(sidecar.get('classes', DEFAULT_CLASSES))
    seq = RadarSequence.from_array(frames, SceneLabel.parse(sidecar.get('scene')),
                                   str(sidecar.get('sequence_id', os.path.basename(os.path.normpath(path)))),
                                   classes)

    annotations = None
    csv_path = os.path.join(path, ANNOTATIONS_FILE)
    if os.path.exists(csv_path):
        annotations = read_annotations_csv(csv_path, grid_size, len(classes), num_frames)
    logger.debug(f"[DATA] Read sequence {seq.sequence_id} from {path}: {num_frames} frames, "
                 f"{len(annotations) if annotations is not None else 'no'} annotations")
    return seq, annotations


def load_dataset(root: str) -> List[Tuple[RadarSequence, Optional[List[ObjectAnnotation]]]]:
    """Reads every sequence directory under root, in natural sort order."""
    if not os.path.isdir(root):
        raise DataError(f"Dataset root not found: {root}")
    entries = natsorted(name for name in os.listdir(root)
                        if os.path.isfile(os.path.join(root, name, SIDECAR_FILE)))
    dataset = [read_sequence(os.path.join(root, name)) for name in entries]
    logger.info(f"[DATA] Loaded {len(dataset)} sequences from {root}")
    return dataset


# ---------------------------------------------------------------------------
# Windows

def snippet_starts(num_frames: int, window: int, stride: int) -> List[int]:
    if window < 1 or stride < 1:
        raise DataError(f"window and stride must be >= 1 (window={window}, stride={stride})")
    if window > num_frames:
        raise DataError(f"window {window} exceeds sequence length {num_frames}")
    starts = list(range(0, num_frames - window + 1, stride))
    # the last window ends exactly at the last frame
    if starts[-1] != num_frames - window:
        starts.append(num_frames - window)
    return starts


def slice_snippets(seq: RadarSequence, window: int, stride: int) -> List[RadarSnippet]:
    data = seq.to_array()
    return [RadarSnippet(data[:, start:start + window], seq.sequence_id, start, seq.scene)
            for start in snippet_starts(seq.num_frames, window, stride)]


def annotations_in_window(annotations: Sequence[ObjectAnnotation], start: int, window: int) -> List[ObjectAnnotation]:
    """Annotations inside [start, start + window), re-indexed relative to start."""
    return [ObjectAnnotation(a.frame_index - start, a.class_id, a.range_idx, a.azimuth_idx)
            for a in annotations if start <= a.frame_index < start + window]


def group_by_frame(items, num_frames: int) -> List[list]:
    """Buckets annotations or detections by frame_index."""
    frames = [[] for _ in range(num_frames)]
    for item in items:
        if not 0 <= item.frame_index < num_frames:
            raise DataError(f"frame {item.frame_index} outside [0, {num_frames})")
        frames[item.frame_index].append(item)
    return frames


def split_sequences(scenes: Dict[str, Optional[SceneLabel]], val_fraction: float,
                    seed: int) -> Tuple[List[str], List[str]]:
    """Scene-stratified train/validation split of sequence ids.

    Every scene with at least two sequences contributes at least one to each side.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    train_ids, val_ids = [], []
    by_scene: Dict[str, List[str]] = {}
    for seq_id in natsorted(scenes):
        key = scenes[seq_id].value if scenes[seq_id] is not None else 'unknown'
        by_scene.setdefault(key, []).append(seq_id)
    for key in sorted(by_scene):
        ids = list(by_scene[key])
        order = rng.permutation(len(ids))
        ids = [ids[i] for i in order]
        n_val = int(round(len(ids) * val_fraction))
        if len(ids) >= 2:
            n_val = min(max(n_val, 1), len(ids) - 1)
        else:
            n_val = 0
        val_ids.extend(ids[:n_val])
        train_ids.extend(ids[n_val:])
    return natsorted(train_ids), natsorted(val_ids)
