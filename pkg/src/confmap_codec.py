"""Encodes point annotations into Gaussian ConfMaps (the supervision target)."""
import math
import logging
from typing import Sequence, Tuple

import numpy as np

from .errors import DataError, ConfigError
from .radar_data import ConfMap, ObjectAnnotation, DEFAULT_CLASSES

logger = logging.getLogger(__name__)

DEFAULT_SIGMAS = (2.0, 3.0, 4.0)
TRUNCATION = 3.0


def gaussian_patch(sigma: float) -> Tuple[np.ndarray, int]:
    """Returns the truncated Gaussian stamp and its radius in pixels."""
    radius = int(math.floor(TRUNCATION * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    dist2 = offsets[:, None] ** 2 + offsets[None, :] ** 2
    patch = np.exp(-dist2 / (2.0 * sigma * sigma))
    patch[dist2 > (TRUNCATION * sigma) ** 2] = 0.0
    return patch, radius


def encode_confmap(annotations: Sequence[ObjectAnnotation], num_frames: int, grid_size: int,
                   sigmas: Sequence[float] = DEFAULT_SIGMAS) -> ConfMap:
    """Renders one (C_cls, T, W, H) ConfMap; overlapping objects combine by maximum."""
    sigmas = tuple(float(s) for s in sigmas)
    if any(s <= 0 for s in sigmas):
        raise ConfigError(f"sigmas must be positive, got {sigmas}")
    num_classes = len(sigmas)
    data = np.zeros((num_classes, num_frames, grid_size, grid_size), dtype=np.float32)
    patches = {}

    for ann in annotations:
        if not 0 <= ann.frame_index < num_frames:
            raise DataError(f"annotation frame {ann.frame_index} outside [0, {num_frames})")
        ann.validate(grid_size, num_classes)
        if ann.class_id not in patches:
            patches[ann.class_id] = gaussian_patch(sigmas[ann.class_id])
        patch, radius = patches[ann.class_id]

        az, rng = ann.azimuth_idx, ann.range_idx
        a0, a1 = max(az - radius, 0), min(az + radius + 1, grid_size)
        r0, r1 = max(rng - radius, 0), min(rng + radius + 1, grid_size)
        stamp = patch[a0 - az + radius:a1 - az + radius, r0 - rng + radius:r1 - rng + radius]
        plane = data[ann.class_id, ann.frame_index]
        np.maximum(plane[a0:a1, r0:r1], stamp, out=plane[a0:a1, r0:r1])

    return ConfMap(data)


def sigmas_from_mapping(table: dict, classes=DEFAULT_CLASSES) -> Tuple[float, ...]:
    missing = [name for name in classes if name not in table]
    if missing:
        raise ConfigError(f"sigma table is missing classes {missing}")
    return tuple(float(table[name]) for name in classes)
