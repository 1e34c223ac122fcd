"""PGM/PPM renders of RAMap magnitudes, class-coloured ConfMaps and detection overlays."""
import io
import os
import logging
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .errors import DataError, ShapeError
from .file_utils import atomic_write_bytes
from .radar_data import ConfMap, Detection, RadarSequence, group_by_frame

logger = logging.getLogger(__name__)

# one colour per class: pedestrian, cyclist, car
CLASS_COLORS = ((255, 64, 64), (64, 255, 64), (64, 128, 255))
CROSS_COLOR = (255, 255, 255)
CROSS_ARM = 2


def render_ramap(frame: np.ndarray, scale: int = 1) -> Image.Image:
    """Grayscale magnitude of one (C_RF, W, H) frame; rows are azimuth, columns range."""
    if frame.ndim != 3 or frame.shape[0] != 2:
        raise ShapeError(f"expected a (2, W, H) RF frame, got {frame.shape}")
    magnitude = np.hypot(frame[0].astype(np.float64), frame[1].astype(np.float64))
    peak = magnitude.max()
    pixels = np.zeros(magnitude.shape, dtype=np.uint8) if peak <= 0 else \
        np.round(255.0 * magnitude / peak).astype(np.uint8)
    return _scaled(Image.fromarray(pixels), scale)


def render_confmap(frame_map: np.ndarray, detections: Sequence[Detection] = (), scale: int = 1) -> Image.Image:
    """Per-class colours blended additively, detections drawn as crosses."""
    if frame_map.ndim != 3:
        raise ShapeError(f"expected a (C_cls, W, H) ConfMap slice, got {frame_map.shape}")
    if frame_map.shape[0] > len(CLASS_COLORS):
        raise ShapeError(f"only {len(CLASS_COLORS)} class colours are defined, got {frame_map.shape[0]} classes")
    rgb = np.zeros(frame_map.shape[1:] + (3,), dtype=np.float64)
    for class_id in range(frame_map.shape[0]):
        rgb += frame_map[class_id].astype(np.float64)[..., None] * np.array(CLASS_COLORS[class_id], dtype=np.float64)
    image = _scaled(Image.fromarray(np.round(np.clip(rgb, 0, 255)).astype(np.uint8)), scale)
    draw = ImageDraw.Draw(image)
    for det in detections:
        x = det.range_idx * scale + scale // 2
        y = det.azimuth_idx * scale + scale // 2
        arm = CROSS_ARM * scale
        draw.line([(x - arm, y), (x + arm, y)], fill=CROSS_COLOR)
        draw.line([(x, y - arm), (x, y + arm)], fill=CROSS_COLOR)
    return image


def _scaled(image: Image.Image, scale: int) -> Image.Image:
    if scale < 1:
        raise DataError(f"render scale must be >= 1, got {scale}")
    if scale == 1:
        return image
    return image.resize((image.width * scale, image.height * scale), Image.NEAREST)


def image_bytes(image: Image.Image) -> bytes:
    """Binary PGM (P5) for grayscale, PPM (P6) for colour."""
    buf = io.BytesIO()
    image.save(buf, format='PPM')
    return buf.getvalue()


def save_image(image: Image.Image, path: str) -> str:
    return atomic_write_bytes(path, image_bytes(image))


def render_sequence(seq: RadarSequence, out_dir: str, start: int = 0, stop: Optional[int] = None,
                    confmap: Optional[ConfMap] = None, detections: Sequence[Detection] = (),
                    scale: int = 1) -> List[str]:
    """Writes frame_NNNN.pgm (and confmap_NNNN.ppm when a ConfMap is given) for frames [start, stop)."""
    stop = seq.num_frames if stop is None else stop
    if not 0 <= start < stop <= seq.num_frames:
        raise DataError(f"frame range [{start}, {stop}) outside sequence of {seq.num_frames} frames")
    if confmap is not None and confmap.window != seq.num_frames:
        raise ShapeError(f"ConfMap covers {confmap.window} frames, sequence has {seq.num_frames}")
    per_frame = group_by_frame(detections, seq.num_frames)
    paths = []
    for t in range(start, stop):
        paths.append(save_image(render_ramap(seq.frames[t].data, scale), os.path.join(out_dir, f"frame_{t:04d}.pgm")))
        if confmap is not None:
            image = render_confmap(confmap.data[:, t], per_frame[t], scale)
            paths.append(save_image(image, os.path.join(out_dir, f"confmap_{t:04d}.ppm")))
    logger.info(f"[RENDER] Wrote {len(paths)} images for {seq.sequence_id} frames [{start}, {stop}) to {out_dir}")
    return paths
