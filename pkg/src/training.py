"""Two-stage training: universal detector, per-scene fine-tuning, and the scene classifier."""
import io
import csv
import math
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import ModelCheckpoint, Stage, require_stage
from .errors import ConfigError, DataError
from .file_utils import atomic_write_text
from .neural_engine import mse_loss, softmax_cross_entropy
from .optimizer import DEFAULT_LR, LrSchedule, OptimState, adam_step, lr_at
from .radar_data import ConfMap, RadarSnippet, SceneLabel
from .scenemix import AugmentPolicy, MixSample, ScenePool, apply_policy
from .slnet_models import ArchSpec, ArchVariant, SLNetModel, build

logger = logging.getLogger(__name__)

SCENE_ORDER = (SceneLabel.STATIC, SceneLabel.DYNAMIC)
HISTORY_HEADER = ['epoch', 'stage', 'lr', 'train_loss', 'val_loss']

# distinct stream per stage so fine-tuning never replays the universal shuffle
_STAGE_STREAM = {Stage.UNIVERSAL: 0, Stage.FINETUNED_STATIC: 1, Stage.FINETUNED_DYNAMIC: 2, Stage.CLASSIFIER: 3}


@dataclass(frozen=True)
class TrainPlan:
    epochs_universal: int = 50
    epochs_finetune: int = 30
    epochs_classifier: int = 20
    batch_size: int = 4
    lr: float = DEFAULT_LR
    warmup_fraction: float = 0.05
    cycles: int = 1
    cycle_mult: float = 1.0
    min_lr_fraction: float = 0.01
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    seed: int = 0

    def __post_init__(self):
        if self.epochs_universal < 1 or self.epochs_classifier < 1:
            raise ConfigError("epochs_universal and epochs_classifier must be >= 1")
        if self.epochs_finetune < 0:
            raise ConfigError(f"epochs_finetune must be >= 0, got {self.epochs_finetune}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError(f"warmup_fraction must lie in [0, 1), got {self.warmup_fraction}")
        if self.cycles < 1:
            raise ConfigError(f"cycles must be >= 1, got {self.cycles}")

    def schedule(self, total_steps: int) -> LrSchedule:
        return LrSchedule.for_stage(total_steps, self.warmup_fraction, self.cycle_mult,
                                    self.min_lr_fraction, self.cycles)


@dataclass(frozen=True)
class HistoryRow:
    epoch: int
    stage: str
    lr: float
    train_loss: float
    val_loss: Optional[float]


def write_history_csv(path: str, rows: Sequence[HistoryRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(HISTORY_HEADER)
    for row in rows:
        writer.writerow([row.epoch, row.stage, repr(row.lr), repr(row.train_loss),
                         '' if row.val_loss is None else repr(row.val_loss)])
    return atomic_write_text(path, buf.getvalue())


def _stream(seed: int, stage: Stage, epoch: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _STAGE_STREAM[stage], epoch])))


def _batches(n: int, batch_size: int, order: Sequence[int]):
    for start in range(0, n, batch_size):
        yield list(order[start:start + batch_size])


def _stack_inputs(snippets: Sequence[RadarSnippet]) -> np.ndarray:
    return np.stack([s.data for s in snippets], axis=0)


def evaluate_loss(model: SLNetModel, samples: Sequence[MixSample], batch_size: int = 4) -> float:
    """Eval-mode mean squared error over samples, without augmentation."""
    if not samples:
        raise DataError("cannot evaluate the loss of an empty sample set")
    total, count = 0.0, 0
    for idx in _batches(len(samples), batch_size, range(len(samples))):
        x = _stack_inputs([samples[i].snippet for i in idx])
        y = np.stack([samples[i].confmap.data for i in idx], axis=0)
        out, _ = model.forward(x, 'eval')
        loss, _ = mse_loss(out, y)
        total += loss * y.size
        count += y.size
    return total / count


def _fit_detector(model: SLNetModel, samples: Sequence[MixSample], val_samples: Optional[Sequence[MixSample]],
                  plan: TrainPlan, epochs: int, stage: Stage,
                  on_epoch: Optional[Callable[[HistoryRow], None]] = None) -> Tuple[OptimState, List[HistoryRow]]:
    n = len(samples)
    steps_per_epoch = math.ceil(n / plan.batch_size)
    schedule = plan.schedule(max(epochs * steps_per_epoch, 1))
    optim = OptimState.for_parameters(model.params.items(), base_lr=plan.lr)
    pool = ScenePool(samples)
    history: List[HistoryRow] = []
    step = 0
    for epoch in range(epochs):
        order = _stream(plan.seed, stage, epoch).permutation(n)
        losses = []
        lr = plan.lr
        for b, idx in enumerate(_batches(n, plan.batch_size, order)):
            batch = []
            for k in idx:
                sample = samples[k]
                if plan.augment.enabled:
                    sample_index = (_STAGE_STREAM[stage] * epochs + epoch) * n + int(k)
                    sample = apply_policy(sample, pool, plan.augment, sample_index=sample_index)
                batch.append(sample)
            x = _stack_inputs([s.snippet for s in batch])
            y = np.stack([s.confmap.data for s in batch], axis=0)
            out, cache = model.forward(x, 'train')
            loss, grad = mse_loss(out, y)
            _, grads = model.backward(cache, grad)
            lr = lr_at(schedule, step, plan.lr)
            adam_step(optim, model.params, grads, lr)
            step += 1
            losses.append(loss)
            logger.debug(f"[TRAIN] {stage.value} epoch {epoch + 1} batch {b + 1}/{steps_per_epoch}: "
                         f"loss={loss:.6f} lr={lr:.3e}")
        val_loss = evaluate_loss(model, val_samples, plan.batch_size) if val_samples else None
        row = HistoryRow(epoch + 1, stage.value, lr, float(np.mean(losses)), val_loss)
        history.append(row)
        logger.info(f"[TRAIN] {stage.value} {model.arch.name} epoch {row.epoch}/{epochs}: "
                    f"train_loss={row.train_loss:.6f}"
                    + (f" val_loss={val_loss:.6f}" if val_loss is not None else ''))
        if on_epoch is not None:
            on_epoch(row)
    return optim, history


def _check_detector_data(samples: Sequence[MixSample], arch: ArchSpec) -> None:
    if not samples:
        raise DataError("training needs at least one snippet")
    expected = (arch.in_channels, arch.window, arch.grid_size, arch.grid_size)
    for s in samples:
        if s.snippet.data.shape != expected:
            raise DataError(f"snippet from {s.snippet.source_sequence} has shape {s.snippet.data.shape}, "
                            f"{arch.name} expects {expected}")
        if s.confmap.num_classes != arch.num_classes:
            raise DataError(f"ConfMap has {s.confmap.num_classes} classes, {arch.name} predicts {arch.num_classes}")


def train_universal(samples: Sequence[MixSample], plan: TrainPlan, arch: ArchSpec,
                    val_samples: Optional[Sequence[MixSample]] = None, fingerprint: str = '',
                    on_epoch=None) -> Tuple[ModelCheckpoint, List[HistoryRow]]:
    """First stage: one detector trained on snippets of every scene."""
    if not arch.is_detector:
        raise ConfigError(f"{arch.name} is not a detector architecture")
    _check_detector_data(samples, arch)
    scenes = {s.scene for s in samples if s.scene is not None}
    if len(scenes) < len(SCENE_ORDER):
        raise DataError(f"universal training needs snippets of both scenes, got {sorted(s.value for s in scenes)}")
    model = build(arch, seed=plan.seed)
    optim, history = _fit_detector(model, samples, val_samples, plan, plan.epochs_universal, Stage.UNIVERSAL, on_epoch)
    metadata = {'epochs': plan.epochs_universal, 'num_samples': len(samples),
                'train_eval_loss': evaluate_loss(model, samples, plan.batch_size)}
    ckpt = ModelCheckpoint.from_model(model, Stage.UNIVERSAL, fingerprint, optim, metadata)
    return ckpt, history


def finetune(base: ModelCheckpoint, samples: Sequence[MixSample], plan: TrainPlan, scene: SceneLabel,
             val_samples: Optional[Sequence[MixSample]] = None, fingerprint: Optional[str] = None,
             on_epoch=None) -> Tuple[ModelCheckpoint, List[HistoryRow]]:
    """Second stage: continue from the universal model on one scene's snippets only."""
    require_stage(base, [Stage.UNIVERSAL], 'fine-tuning')
    scene = SceneLabel.parse(scene)
    if scene is None:
        raise DataError("fine-tuning needs a known scene")
    _check_detector_data(samples, base.arch)
    foreign = sorted({s.snippet.source_sequence for s in samples if s.scene is not scene})
    if foreign:
        raise DataError(f"fine-tuning on {scene.value} received snippets of another scene from {foreign[:3]}")
    model = base.to_model()
    stage = Stage.for_scene(scene)
    optim, history = _fit_detector(model, samples, val_samples, plan, plan.epochs_finetune, stage, on_epoch)
    metadata = {'epochs': plan.epochs_finetune, 'num_samples': len(samples), 'scene': scene.value,
                'train_eval_loss': evaluate_loss(model, samples, plan.batch_size)}
    ckpt = ModelCheckpoint.from_model(model, stage, base.fingerprint if fingerprint is None else fingerprint,
                                      optim if plan.epochs_finetune else None, metadata)
    return ckpt, history


# ---------------------------------------------------------------------------
# Scene classifier

@dataclass(frozen=True)
class SceneReportRow:
    scene: str
    train_sequences: int
    test_sequences: int
    accuracy: Optional[float]


@dataclass(frozen=True)
class ClassifierReport:
    snippet_accuracy: Optional[float]
    sequence_accuracy: Optional[float]
    rows: Tuple[SceneReportRow, ...]

    def to_dict(self) -> dict:
        return {'snippet_accuracy': self.snippet_accuracy, 'sequence_accuracy': self.sequence_accuracy,
                'scenes': [row.__dict__ for row in self.rows]}


def majority_vote(labels: Sequence[SceneLabel]) -> SceneLabel:
    """Most frequent scene; ties (and no votes) resolve to Static."""
    dynamic = sum(1 for label in labels if label is SceneLabel.DYNAMIC)
    static = sum(1 for label in labels if label is SceneLabel.STATIC)
    return SceneLabel.DYNAMIC if dynamic > static else SceneLabel.STATIC


def _labels(snippets: Sequence[RadarSnippet]) -> np.ndarray:
    return np.array([SCENE_ORDER.index(s.scene) for s in snippets], dtype=np.int64)


def train_classifier(snippets: Sequence[RadarSnippet], plan: TrainPlan, arch: ArchSpec,
                     held_out: Optional[Sequence[RadarSnippet]] = None, fingerprint: str = '',
                     on_epoch=None) -> Tuple[ModelCheckpoint, List[HistoryRow], ClassifierReport]:
    """Cross-entropy training of the two-way scene head; reports held-out accuracy."""
    if arch.variant is not ArchVariant.CLASSIFIER:
        raise ConfigError(f"{arch.name} is not a classifier architecture")
    if any(s.scene is None for s in snippets):
        raise DataError("classifier training snippets must carry a scene label")
    present = {s.scene for s in snippets}
    if len(present) < len(SCENE_ORDER):
        raise DataError(f"classifier training needs both scenes, got {sorted(s.value for s in present)}")

    model = build(arch, seed=plan.seed)
    labels = _labels(snippets)
    n = len(snippets)
    epochs = plan.epochs_classifier
    steps_per_epoch = math.ceil(n / plan.batch_size)
    schedule = plan.schedule(epochs * steps_per_epoch)
    optim = OptimState.for_parameters(model.params.items(), base_lr=plan.lr)
    history: List[HistoryRow] = []
    step = 0
    for epoch in range(epochs):
        order = _stream(plan.seed, Stage.CLASSIFIER, epoch).permutation(n)
        losses = []
        lr = plan.lr
        for idx in _batches(n, plan.batch_size, order):
            x = _stack_inputs([snippets[i] for i in idx])
            logits, cache = model.forward(x, 'train')
            loss, grad = softmax_cross_entropy(logits, labels[idx])
            _, grads = model.backward(cache, grad)
            lr = lr_at(schedule, step, plan.lr)
            adam_step(optim, model.params, grads, lr)
            step += 1
            losses.append(loss)
        row = HistoryRow(epoch + 1, Stage.CLASSIFIER.value, lr, float(np.mean(losses)), None)
        history.append(row)
        logger.info(f"[TRAIN] classifier epoch {row.epoch}/{epochs}: train_loss={row.train_loss:.6f}")
        if on_epoch is not None:
            on_epoch(row)

    report = scene_report(model, snippets, held_out or [], plan.batch_size)
    metadata = {'epochs': epochs, 'num_samples': n, 'report': report.to_dict()}
    ckpt = ModelCheckpoint.from_model(model, Stage.CLASSIFIER, fingerprint, None, metadata)
    return ckpt, history, report


def _predict_scenes(model: SLNetModel, snippets: Sequence[RadarSnippet], batch_size: int) -> List[SceneLabel]:
    scenes = []
    for idx in _batches(len(snippets), batch_size, range(len(snippets))):
        logits, _ = model.forward(_stack_inputs([snippets[i] for i in idx]), 'eval')
        scenes.extend(SCENE_ORDER[int(k)] for k in np.argmax(logits, axis=1))
    return scenes


def scene_report(model: SLNetModel, train: Sequence[RadarSnippet], test: Sequence[RadarSnippet],
                 batch_size: int = 4) -> ClassifierReport:
    """Held-out accuracy per snippet and per sequence (majority vote), split by scene."""
    def sequences(snips):
        by_seq: Dict[str, SceneLabel] = {}
        for s in snips:
            by_seq[s.source_sequence] = s.scene
        return by_seq

    train_seqs, test_seqs = sequences(train), sequences(test)
    predicted = _predict_scenes(model, test, batch_size) if test else []
    votes: Dict[str, List[SceneLabel]] = {}
    for snip, label in zip(test, predicted):
        votes.setdefault(snip.source_sequence, []).append(label)
    decided = {seq_id: majority_vote(v) for seq_id, v in votes.items()}

    snippet_acc = float(np.mean([p is s.scene for p, s in zip(predicted, test)])) if test else None
    sequence_acc = float(np.mean([decided[k] is test_seqs[k] for k in sorted(decided)])) if decided else None
    rows = []
    for scene in SCENE_ORDER:
        ids = sorted(k for k, v in test_seqs.items() if v is scene)
        acc = float(np.mean([decided[k] is scene for k in ids])) if ids else None
        rows.append(SceneReportRow(scene.value, sum(1 for v in train_seqs.values() if v is scene), len(ids), acc))
    report = ClassifierReport(snippet_acc, sequence_acc, tuple(rows))
    for row in rows:
        logger.info(f"[TRAIN] classifier scene={row.scene}: train={row.train_sequences} test={row.test_sequences} "
                    f"accuracy={'n/a' if row.accuracy is None else f'{row.accuracy:.3f}'}")
    return report


# ---------------------------------------------------------------------------
# Inference

def predict_confmaps(ckpt: ModelCheckpoint, snippets: Sequence[RadarSnippet], batch_size: int = 4,
                     model: Optional[SLNetModel] = None) -> List[ConfMap]:
    require_stage(ckpt, [Stage.UNIVERSAL, Stage.FINETUNED_STATIC, Stage.FINETUNED_DYNAMIC], 'ConfMap prediction')
    model = model or ckpt.to_model()
    maps = []
    for idx in _batches(len(snippets), batch_size, range(len(snippets))):
        out, _ = model.forward(_stack_inputs([snippets[i] for i in idx]), 'eval')
        maps.extend(ConfMap(np.clip(o, 0.0, 1.0)) for o in out)
    return maps


def predict_confmap(ckpt: ModelCheckpoint, snippet: RadarSnippet) -> ConfMap:
    return predict_confmaps(ckpt, [snippet])[0]


def classify_snippets(ckpt: ModelCheckpoint, snippets: Sequence[RadarSnippet], batch_size: int = 4) -> List[SceneLabel]:
    require_stage(ckpt, [Stage.CLASSIFIER], 'scene classification')
    return _predict_scenes(ckpt.to_model(), snippets, batch_size)


def classify_scene(ckpt: ModelCheckpoint, snippet: RadarSnippet) -> SceneLabel:
    return classify_snippets(ckpt, [snippet])[0]
