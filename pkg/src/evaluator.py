"""AP/AR over a sweep of OLS match thresholds, overall, per scene and per class."""
import io
import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError
from .file_utils import atomic_write_text
from .geometry import OlsParams, PolarGrid, ols
from .radar_data import Detection, ObjectAnnotation, SceneLabel, group_by_frame

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(9))
REPORT_CSV_HEADER = ['scope', 'threshold', 'tp', 'fp', 'fn', 'precision', 'recall']


def validate_thresholds(thresholds: Sequence[float]) -> Tuple[float, ...]:
    thresholds = tuple(float(t) for t in thresholds)
    if not thresholds or any(not 0.0 < t <= 1.0 for t in thresholds) or list(thresholds) != sorted(set(thresholds)):
        raise ConfigError(f"thresholds must be strictly increasing values in (0, 1], got {thresholds}")
    return thresholds


@dataclass(frozen=True)
class MatchResult:
    tp: int
    fp: int
    fn: int
    matching: Tuple[Tuple[int, int], ...]


def _gt_order(gts: Sequence[ObjectAnnotation]) -> List[int]:
    return sorted(range(len(gts)), key=lambda i: (gts[i].class_id, gts[i].range_idx, gts[i].azimuth_idx))


def _det_order(dets: Sequence[Detection]) -> List[int]:
    return sorted(range(len(dets)), key=lambda i: dets[i].sort_key())


def _ols_matrix(dets, gts, grid, ols_params) -> np.ndarray:
    """OLS of every detection to every same-class ground truth; -1 across classes."""
    scores = np.full((len(dets), len(gts)), -1.0)
    for i, d in enumerate(dets):
        for j, g in enumerate(gts):
            if d.class_id == g.class_id:
                scores[i, j] = ols(g, d, grid, ols_params)
    return scores


def _greedy(scores: np.ndarray, det_order: List[int], gt_order: List[int], t: float) -> List[Tuple[int, int]]:
    taken = set()
    matching = []
    for i in det_order:
        best, best_score = None, -1.0
        for j in gt_order:
            if j in taken:
                continue
            if scores[i, j] > best_score:
                best, best_score = j, scores[i, j]
        if best is not None and best_score >= t:
            taken.add(best)
            matching.append((i, best))
    return matching


def match_frame(dets: Sequence[Detection], gts: Sequence[ObjectAnnotation], t: float, grid: PolarGrid,
                ols_params: OlsParams) -> MatchResult:
    """Greedy class-strict matching: detections by descending confidence claim their best ground truth."""
    scores = _ols_matrix(dets, gts, grid, ols_params)
    matching = _greedy(scores, _det_order(dets), _gt_order(gts), t)
    return MatchResult(len(matching), len(dets) - len(matching), len(gts) - len(matching), tuple(matching))


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        if self.tp + self.fp == 0:
            return 1.0 if self.fn == 0 else 0.0
        return self.tp / (self.tp + self.fp)

    @property
    def recall(self) -> float:
        if self.tp + self.fn == 0:
            return 1.0
        return self.tp / (self.tp + self.fn)


@dataclass
class Summary:
    """Counts at every threshold and the AP/AR means derived from them."""
    thresholds: Tuple[float, ...]
    counts: List[Counts]

    @classmethod
    def empty(cls, thresholds) -> 'Summary':
        return cls(tuple(thresholds), [Counts() for _ in thresholds])

    @property
    def ap(self) -> float:
        return float(np.mean([c.precision for c in self.counts]))

    @property
    def ar(self) -> float:
        return float(np.mean([c.recall for c in self.counts]))

    @property
    def num_ground_truth(self) -> int:
        return self.counts[0].tp + self.counts[0].fn if self.counts else 0

    def to_dict(self) -> dict:
        return {
            'ap': self.ap, 'ar': self.ar,
            'per_threshold': [{'threshold': t, 'tp': c.tp, 'fp': c.fp, 'fn': c.fn,
                               'precision': c.precision, 'recall': c.recall}
                              for t, c in zip(self.thresholds, self.counts)],
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'Summary':
        rows = data['per_threshold']
        return cls(tuple(r['threshold'] for r in rows), [Counts(r['tp'], r['fp'], r['fn']) for r in rows])


@dataclass
class EvalReport:
    overall: Summary
    per_scene: Dict[str, Summary] = field(default_factory=dict)
    per_class: Dict[int, Summary] = field(default_factory=dict)

    @property
    def ap(self) -> float:
        return self.overall.ap

    @property
    def ar(self) -> float:
        return self.overall.ar

    def to_dict(self) -> dict:
        return {
            'thresholds': list(self.overall.thresholds),
            'overall': self.overall.to_dict(),
            'per_scene': {k: v.to_dict() for k, v in sorted(self.per_scene.items())},
            'per_class': {str(k): v.to_dict() for k, v in sorted(self.per_class.items())},
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'EvalReport':
        try:
            return cls(Summary.from_dict(data['overall']),
                       {k: Summary.from_dict(v) for k, v in data.get('per_scene', {}).items()},
                       {int(k): Summary.from_dict(v) for k, v in data.get('per_class', {}).items()})
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"not an evaluation report: {e}")


def evaluate(detections: Dict[str, Sequence[Detection]], ground_truth: Dict[str, Sequence[ObjectAnnotation]],
             scenes: Dict[str, Optional[SceneLabel]], grid: PolarGrid, ols_params: OlsParams,
             thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
             num_frames: Optional[Dict[str, int]] = None) -> EvalReport:
    """Scores per-sequence detections against per-sequence ground truth.

    Precision and recall aggregate counts over every frame of every sequence.
    """
    thresholds = validate_thresholds(thresholds)
    if set(detections) != set(ground_truth):
        missing = sorted(set(ground_truth) - set(detections))
        extra = sorted(set(detections) - set(ground_truth))
        raise DataError(f"frame universe mismatch: sequences without detections {missing[:3]}, "
                        f"without ground truth {extra[:3]}")
    num_classes = len(ols_params.kappa)
    overall = Summary.empty(thresholds)
    per_scene: Dict[str, Summary] = {}
    per_class = {c: Summary.empty(thresholds) for c in range(num_classes)}

    for seq_id in sorted(ground_truth):
        dets, gts = list(detections[seq_id]), list(ground_truth[seq_id])
        frame_count = max([x.frame_index + 1 for x in dets + gts], default=0)
        if num_frames is not None and seq_id in num_frames:
            if frame_count > num_frames[seq_id]:
                raise DataError(f"{seq_id}: frame {frame_count - 1} outside the sequence's "
                                f"{num_frames[seq_id]} frames")
            frame_count = num_frames[seq_id]
        scene = SceneLabel.parse(scenes.get(seq_id))
        scene_summary = per_scene.setdefault(scene.value if scene else 'unknown', Summary.empty(thresholds))
        for frame_dets, frame_gts in zip(group_by_frame(dets, frame_count), group_by_frame(gts, frame_count)):
            scores = _ols_matrix(frame_dets, frame_gts, grid, ols_params)
            det_order, gt_order = _det_order(frame_dets), _gt_order(frame_gts)
            for k, t in enumerate(thresholds):
                matching = _greedy(scores, det_order, gt_order, t)
                matched_dets = {i for i, _ in matching}
                matched_gts = {j for _, j in matching}
                for summary in (overall, scene_summary):
                    c = summary.counts[k]
                    c.tp += len(matching)
                    c.fp += len(frame_dets) - len(matching)
                    c.fn += len(frame_gts) - len(matching)
                for i, d in enumerate(frame_dets):
                    c = per_class[d.class_id].counts[k]
                    if i in matched_dets:
                        c.tp += 1
                    else:
                        c.fp += 1
                for j, g in enumerate(frame_gts):
                    if j not in matched_gts:
                        per_class[g.class_id].counts[k].fn += 1

    report = EvalReport(overall, per_scene, per_class)
    logger.info(f"[EVAL] AP={report.ap:.4f} AR={report.ar:.4f} over {len(ground_truth)} sequences")
    for name, summary in sorted(per_scene.items()):
        logger.info(f"[EVAL] scene={name}: AP={summary.ap:.4f} AR={summary.ar:.4f}")
    return report


# ---------------------------------------------------------------------------
# Report files

def write_report_json(path: str, report: EvalReport) -> str:
    return atomic_write_text(path, json.dumps(report.to_dict(), indent=2, sort_keys=True) + '\n')


def read_report_json(path: str) -> EvalReport:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return EvalReport.from_dict(json.load(f))
    except json.JSONDecodeError as e:
        raise DataError(f"report {path} is not valid JSON: {e}")


def write_report_csv(path: str, report: EvalReport) -> str:
    """One row per (scope, threshold), for plotting."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(REPORT_CSV_HEADER)
    scopes = [('overall', report.overall)]
    scopes += [(f"scene:{k}", v) for k, v in sorted(report.per_scene.items())]
    scopes += [(f"class:{k}", v) for k, v in sorted(report.per_class.items())]
    for scope, summary in scopes:
        for t, c in zip(summary.thresholds, summary.counts):
            writer.writerow([scope, f"{t:.2f}", c.tp, c.fp, c.fn, f"{c.precision:.6f}", f"{c.recall:.6f}"])
    return atomic_write_text(path, buf.getvalue())


COMPARE_HEADER = ['scope', 'metric', 'baseline', 'candidate', 'delta']


def compare_reports(baseline: EvalReport, candidate: EvalReport) -> List[dict]:
    """AP/AR side by side for the overall and per-scene scopes."""
    rows = []
    scopes = [('overall', baseline.overall, candidate.overall)]
    for scene in sorted(set(baseline.per_scene) | set(candidate.per_scene)):
        if scene in baseline.per_scene and scene in candidate.per_scene:
            scopes.append((scene, baseline.per_scene[scene], candidate.per_scene[scene]))
    for scope, a, b in scopes:
        for metric in ('ap', 'ar'):
            va, vb = getattr(a, metric), getattr(b, metric)
            rows.append({'scope': scope, 'metric': metric.upper(), 'baseline': va, 'candidate': vb,
                         'delta': vb - va})
    return rows


def write_table_csv(path: str, rows: Sequence[dict], header: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(header), lineterminator='\n')
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return atomic_write_text(path, buf.getvalue())


def format_table(rows: Sequence[dict], header: Sequence[str]) -> str:
    """Fixed-width text rendering for the log."""
    cells = [[(f"{r[h]:.4f}" if isinstance(r[h], float) else str(r[h])) for h in header] for r in rows]
    widths = [max([len(h)] + [len(c[i]) for c in cells]) for i, h in enumerate(header)]
    lines = ['  '.join(h.ljust(w) for h, w in zip(header, widths))]
    lines += ['  '.join(c.ljust(w) for c, w in zip(row, widths)) for row in cells]
    return '\n'.join(lines)
