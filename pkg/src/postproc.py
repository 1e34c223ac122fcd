"""ConfMap decoding and the scene-specific post-processing constraints.

The detector output is turned into point detections by location-based NMS. Static
scenes then go through three constraints (no collision, continuity, border entry);
Dynamic scenes only get the first, since a moving radar makes tracks unreliable.
"""
import io
import csv
import math
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import maximum_filter

from .errors import ConfigError, DataError, ShapeError
from .file_utils import atomic_write_text
from .geometry import OlsParams, PolarGrid, ols
from .radar_data import ConfMap, Detection, SceneLabel

logger = logging.getLogger(__name__)

DETECTION_HEADER = ['frame', 'class', 'range', 'azimuth', 'confidence']

# 3x3 neighbourhood without its centre, for strict local maxima
_NEIGHBOURS = np.array([[1, 1, 1], [1, 0, 1], [1, 1, 1]], dtype=bool)


@dataclass(frozen=True)
class PostprocPolicy:
    peak_threshold: float = 0.1
    nms_ols_threshold: float = 0.3
    collision_ols_threshold: float = 0.6
    max_gap: int = 2
    border_margin: int = 10
    track_ols_threshold: float = 0.5
    existence_factor: int = 3
    scene: Optional[SceneLabel] = None

    def __post_init__(self):
        for name in ('peak_threshold', 'nms_ols_threshold', 'collision_ols_threshold', 'track_ols_threshold'):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {value}")
        if self.max_gap not in (1, 2):
            raise ConfigError(f"max_gap must be 1 or 2, got {self.max_gap}")
        if self.border_margin < 0 or self.existence_factor < 1:
            raise ConfigError("border_margin must be >= 0 and existence_factor >= 1")
        object.__setattr__(self, 'scene', SceneLabel.parse(self.scene))

    @property
    def existence_floor(self) -> int:
        return self.existence_factor * self.border_margin


@dataclass
class Track:
    track_id: int
    class_id: int
    points: List[Detection] = field(default_factory=list)

    @property
    def first(self) -> Detection:
        return self.points[0]

    @property
    def last(self) -> Detection:
        return self.points[-1]

    def __len__(self):
        return len(self.points)


def _by_key(detections):
    return sorted(detections, key=Detection.sort_key)


# ---------------------------------------------------------------------------
# ConfMap level

def ensemble_confmaps(maps: Sequence[ConfMap]) -> ConfMap:
    """Elementwise mean of several models' ConfMaps."""
    if not maps:
        raise DataError("cannot ensemble an empty list of ConfMaps")
    shape = maps[0].data.shape
    acc = np.zeros(shape, dtype=np.float64)
    for m in maps:
        if m.data.shape != shape:
            raise ShapeError(f"cannot ensemble ConfMaps of shapes {shape} and {m.data.shape}")
        acc += m.data
    return ConfMap((acc / len(maps)).astype(np.float32))


def merge_windows(window_maps: Sequence[Tuple[int, ConfMap]], num_frames: int) -> ConfMap:
    """Per-frame average of every window prediction covering that frame; (C, T, W, H)."""
    if not window_maps:
        raise DataError("no window predictions to merge")
    c, _, w, h = window_maps[0][1].data.shape
    acc = np.zeros((c, num_frames, w, h), dtype=np.float64)
    counts = np.zeros(num_frames, dtype=np.int64)
    for start, cmap in window_maps:
        if cmap.data.shape[0] != c or cmap.data.shape[2:] != (w, h):
            raise ShapeError(f"window at {start} has shape {cmap.data.shape}, expected ({c}, *, {w}, {h})")
        stop = start + cmap.window
        if start < 0 or stop > num_frames:
            raise DataError(f"window [{start}, {stop}) outside sequence of {num_frames} frames")
        acc[:, start:stop] += cmap.data
        counts[start:stop] += 1
    uncovered = np.flatnonzero(counts == 0)
    if uncovered.size:
        raise DataError(f"frames {uncovered[:5].tolist()} are not covered by any window")
    return ConfMap((acc / counts[None, :, None, None]).astype(np.float32))


# ---------------------------------------------------------------------------
# Frame level

def lnms(frame_map: np.ndarray, policy: PostprocPolicy, grid: PolarGrid, ols_params: OlsParams,
         frame_index: int = 0) -> List[Detection]:
    """Location-based NMS on one (C_cls, W, H) slice."""
    if frame_map.ndim != 3:
        raise ShapeError(f"lnms expects a (C_cls, W, H) slice, got {frame_map.shape}")
    detections = []
    for class_id in range(frame_map.shape[0]):
        plane = np.asarray(frame_map[class_id], dtype=np.float64)
        neighbour_max = maximum_filter(plane, footprint=_NEIGHBOURS, mode='constant', cval=-np.inf)
        peaks = np.argwhere((plane > neighbour_max) & (plane > policy.peak_threshold))
        candidates = _by_key(Detection(frame_index, class_id, int(r), int(a), float(min(plane[a, r], 1.0)))
                             for a, r in peaks)
        accepted: List[Detection] = []
        for cand in candidates:
            if all(ols(kept, cand, grid, ols_params) <= policy.nms_ols_threshold for kept in accepted):
                accepted.append(cand)
        detections.extend(accepted)
    return _by_key(detections)


def no_collision(frames: Sequence[Sequence[Detection]], policy: PostprocPolicy, grid: PolarGrid,
                 ols_params: OlsParams) -> List[List[Detection]]:
    """Drops the less confident of any two different-class detections sitting on one spot."""
    result = []
    removed = 0
    for dets in frames:
        kept: List[Detection] = []
        for det in _by_key(dets):
            if any(k.class_id != det.class_id and ols(k, det, grid, ols_params) > policy.collision_ols_threshold
                   for k in kept):
                removed += 1
                continue
            kept.append(det)
        result.append(kept)
    if removed:
        logger.debug(f"[POSTPROC] no_collision removed {removed} detections")
    return result


# ---------------------------------------------------------------------------
# Track level

def build_tracks(frames: Sequence[Sequence[Detection]], policy: PostprocPolicy, grid: PolarGrid,
                 ols_params: OlsParams) -> List[Track]:
    """Greedy frame-to-frame association by OLS, class by class."""
    tracks: List[Track] = []
    for f, dets in enumerate(frames):
        live = [t for t in tracks if f - t.last.frame_index - 1 <= policy.max_gap]
        pairs = []
        ordered = _by_key(dets)
        for d_idx, det in enumerate(ordered):
            for track in live:
                if track.class_id != det.class_id:
                    continue
                score = ols(track.last, det, grid, ols_params)
                if score >= policy.track_ols_threshold:
                    pairs.append((-score, track.track_id, d_idx, track))
        pairs.sort(key=lambda p: p[:3])
        taken_tracks, taken_dets = set(), set()
        for _, track_id, d_idx, track in pairs:
            if track_id in taken_tracks or d_idx in taken_dets:
                continue
            track.points.append(ordered[d_idx])
            taken_tracks.add(track_id)
            taken_dets.add(d_idx)
        for d_idx, det in enumerate(ordered):
            if d_idx not in taken_dets:
                tracks.append(Track(len(tracks), det.class_id, [det]))
    return tracks


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def continuity(tracks: Sequence[Track], policy: PostprocPolicy, grid: Optional[PolarGrid] = None,
               ols_params: Optional[OlsParams] = None) -> List[Track]:
    """Fills short gaps inside tracks by linear interpolation.

    A different-class singleton track sitting at the interpolated spot inside the gap is
    absorbed into the track and relabelled to the track's class.
    """
    singletons: Dict[int, Track] = {t.track_id: t for t in tracks if len(t) == 1}
    absorbed = set()
    filled_tracks = []
    added = 0
    for track in tracks:
        if track.track_id in absorbed:
            continue
        points = [track.points[0]]
        for p, q in zip(track.points, track.points[1:]):
            gap = q.frame_index - p.frame_index - 1
            if 1 <= gap <= policy.max_gap:
                for f in range(p.frame_index + 1, q.frame_index):
                    alpha = (f - p.frame_index) / (gap + 1)
                    fill = Detection(f, track.class_id,
                                     _round_half_up(p.range_idx + alpha * (q.range_idx - p.range_idx)),
                                     _round_half_up(p.azimuth_idx + alpha * (q.azimuth_idx - p.azimuth_idx)),
                                     (p.confidence + q.confidence) / 2.0)
                    interloper = _find_interloper(singletons, absorbed, track, fill, policy, grid, ols_params)
                    if interloper is not None:
                        absorbed.add(interloper.track_id)
                        fill = replace(interloper.first, class_id=track.class_id)
                    points.append(fill)
                    added += 1
            points.append(q)
        filled_tracks.append(Track(track.track_id, track.class_id, points))
    if added:
        logger.debug(f"[POSTPROC] continuity filled {added} detections, relabelled {len(absorbed)}")
    return [t for t in filled_tracks if t.track_id not in absorbed]


def _find_interloper(singletons, absorbed, track, fill, policy, grid, ols_params) -> Optional[Track]:
    if grid is None or ols_params is None:
        return None
    for single in singletons.values():
        det = single.first
        if (single.track_id in absorbed or single.track_id == track.track_id or det.frame_index != fill.frame_index
                or det.class_id == track.class_id):
            continue
        if ols(fill, det, grid, ols_params) > policy.collision_ols_threshold:
            return single
    return None


def border_entry(tracks: Sequence[Track], policy: PostprocPolicy, grid_size: int,
                 sequence_start: int = 0) -> List[Track]:
    """Keeps tracks that could have entered the field of view legitimately.

    A track survives if its first point lies within border_margin cells of a grid edge (inclusive),
    starts within border_margin frames of the sequence start (inclusive), or is at least
    existence_floor points long.
    """
    kept = []
    for track in tracks:
        first = track.first
        edge_distance = min(first.range_idx, first.azimuth_idx,
                            grid_size - 1 - first.range_idx, grid_size - 1 - first.azimuth_idx)
        if (edge_distance <= policy.border_margin
                or first.frame_index - sequence_start <= policy.border_margin
                or len(track) >= policy.existence_floor):
            kept.append(track)
        else:
            logger.debug(f"[POSTPROC] border_entry dropped track {track.track_id} "
                         f"(class {track.class_id}, frame {first.frame_index}, {len(track)} points)")
    return kept


def flatten_tracks(tracks: Sequence[Track], num_frames: int) -> List[List[Detection]]:
    frames: List[List[Detection]] = [[] for _ in range(num_frames)]
    for track in tracks:
        for det in track.points:
            frames[det.frame_index].append(det)
    return [_by_key(dets) for dets in frames]


# ---------------------------------------------------------------------------
# Whole sequence

def apply_constraints(frames: Sequence[Sequence[Detection]], scene: SceneLabel, policy: PostprocPolicy,
                      grid: PolarGrid, ols_params: OlsParams) -> List[List[Detection]]:
    """The scene's constraint chain on per-frame detections."""
    scene = SceneLabel.parse(scene)
    if scene is None:
        raise DataError("post-processing needs a known scene")
    frames = no_collision(frames, policy, grid, ols_params)
    if scene is SceneLabel.DYNAMIC:
        return frames
    tracks = build_tracks(frames, policy, grid, ols_params)
    tracks = continuity(tracks, policy, grid, ols_params)
    tracks = border_entry(tracks, policy, grid.grid_size)
    return flatten_tracks(tracks, len(frames))


def decode_frames(confmap: ConfMap, policy: PostprocPolicy, grid: PolarGrid,
                  ols_params: OlsParams) -> List[List[Detection]]:
    """lnms on every frame of a merged (C, T, W, H) ConfMap."""
    data = confmap.data
    return [lnms(data[:, t], policy, grid, ols_params, frame_index=t) for t in range(data.shape[1])]


def postprocess(confmap: ConfMap, scene: SceneLabel, policy: PostprocPolicy, grid: PolarGrid,
                ols_params: OlsParams) -> List[Detection]:
    """Decodes a merged sequence ConfMap and applies the scene's constraints."""
    raw = decode_frames(confmap, policy, grid, ols_params)
    final = apply_constraints(raw, scene, policy, grid, ols_params)
    detections = [d for dets in final for d in dets]
    logger.info(f"[POSTPROC] scene={SceneLabel.parse(scene).value}: {sum(map(len, raw))} peaks -> "
                f"{len(detections)} detections")
    return detections


# ---------------------------------------------------------------------------
# Detection CSV

def sort_detections(detections: Sequence[Detection]) -> List[Detection]:
    return sorted(detections, key=lambda d: (d.frame_index,) + d.sort_key())


def write_detections_csv(path: str, detections: Sequence[Detection]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(DETECTION_HEADER)
    for d in sort_detections(detections):
        writer.writerow([d.frame_index, d.class_id, d.range_idx, d.azimuth_idx, repr(float(d.confidence))])
    return atomic_write_text(path, buf.getvalue())


def read_detections_csv(path: str, grid_size: Optional[int] = None,
                        num_classes: Optional[int] = None) -> List[Detection]:
    detections = []
    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or [n.strip() for n in reader.fieldnames] != DETECTION_HEADER:
            raise DataError(f"Detection CSV {path} must have header {','.join(DETECTION_HEADER)}")
        for line_no, row in enumerate(reader, start=2):
            try:
                det = Detection(int(row['frame']), int(row['class']), int(row['range']), int(row['azimuth']),
                                float(row['confidence']))
            except (TypeError, ValueError) as e:
                raise DataError(f"{path}:{line_no}: unparsable detection row {row}: {e}")
            if grid_size is not None and not (0 <= det.range_idx < grid_size and 0 <= det.azimuth_idx < grid_size):
                raise DataError(f"{path}:{line_no}: detection outside grid of size {grid_size}")
            if num_classes is not None and not 0 <= det.class_id < num_classes:
                raise DataError(f"{path}:{line_no}: class {det.class_id} outside [0, {num_classes})")
            detections.append(det)
    return detections
