"""The scene-aware workflow behind each command-line subcommand.

Every ``cmd_*`` function takes an already validated PipelineConfig, so a bad
configuration fails before anything is written.
"""
import os
import json
import logging
from dataclasses import replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import ModelCheckpoint, Stage, load_checkpoint, save_checkpoint
from .config import PipelineConfig, config_fingerprint
from .confmap_codec import encode_confmap
from .errors import CheckpointError, DataError
from .evaluator import (COMPARE_HEADER, EvalReport, compare_reports, evaluate, format_table, read_report_json,
                        write_report_csv, write_report_json, write_table_csv)
from .file_utils import atomic_write_text
from .postproc import (apply_constraints, decode_frames, ensemble_confmaps, merge_windows, read_detections_csv,
                       write_detections_csv)
from .radar_data import (ANNOTATIONS_FILE, ConfMap, Detection, ObjectAnnotation, RadarSequence, SceneLabel,
                         annotations_in_window, load_dataset, read_sequence, read_tensor, slice_snippets,
                         split_sequences, write_sequence, write_tensor)
from .render import render_confmap, render_ramap, render_sequence, save_image
from .scenemix import AugmentPolicy, MixSample, noise_mix, random_crop_region, video_crop_mix, video_mix
from .slnet_models import ArchSpec, SLNetModel
from .synth_generator import generate_sequence, make_scenario
from .training import (SCENE_ORDER, HistoryRow, TrainPlan, classify_snippets, finetune, majority_vote, predict_confmaps,
                       train_classifier, train_universal, write_history_csv)

logger = logging.getLogger(__name__)

MANIFEST_FILE = 'manifest.json'
CHECKPOINT_DIR = 'checkpoints'
CLASSIFIER_FILE = 'classifier.slck'
HISTORY_FILE = 'training_log.csv'
ABLATION_HEADER = ['row', 'AP', 'AR', 'AP_static', 'AP_dynamic', 'AR_static', 'AR_dynamic']


def _json(data) -> str:
    return json.dumps(data, indent=2, sort_keys=True) + '\n'


def checkpoint_path(cfg: PipelineConfig, stage: Stage, arch: Optional[ArchSpec] = None) -> str:
    directory = os.path.join(cfg.output_dir, CHECKPOINT_DIR)
    if stage is Stage.CLASSIFIER:
        return os.path.join(directory, CLASSIFIER_FILE)
    return os.path.join(directory, f"{stage.value}_{arch.name}.slck")


# ---------------------------------------------------------------------------
# gen-data

def sequence_seed(seed: int, scene: SceneLabel, index: int) -> int:
    """Per-sequence generator seed derived from (seed, scene, index)."""
    state = np.random.SeedSequence([seed, SCENE_ORDER.index(scene), index]).generate_state(1, np.uint64)
    return int(state[0])


def cmd_gen_data(cfg: PipelineConfig, static: Optional[int] = None, dynamic: Optional[int] = None) -> Dict:
    """Writes synthetic sequences under dataset_root and returns the manifest."""
    counts = {SceneLabel.STATIC: cfg.generator.static if static is None else static,
              SceneLabel.DYNAMIC: cfg.generator.dynamic if dynamic is None else dynamic}
    if any(n < 0 for n in counts.values()):
        raise DataError(f"sequence counts must be >= 0, got {[n for n in counts.values()]}")
    gen = cfg.generator
    entries = []
    os.makedirs(cfg.dataset_root, exist_ok=True)
    for scene in SCENE_ORDER:
        for i in range(counts[scene]):
            seq_id = f"{scene.value}_{i:03d}"
            seed = sequence_seed(cfg.seed, scene, i)
            overrides = dict(num_frames=gen.num_frames, grid_size=cfg.grid.grid_size, num_objects=gen.num_objects,
                             noise_floor=gen.noise_floor, clutter_level=gen.clutter_level,
                             classes=cfg.classes, sequence_id=seq_id)
            if scene is SceneLabel.DYNAMIC:
                overrides['ego_drift'] = gen.ego_drift
            seq, annotations = generate_sequence(make_scenario(seed, scene, **overrides))
            write_sequence(seq, os.path.join(cfg.dataset_root, seq_id), annotations)
            entries.append({'sequence_id': seq_id, 'scene': scene.value, 'seed': seed,
                            'num_frames': seq.num_frames, 'num_annotations': len(annotations)})
    manifest = {'dataset_root': cfg.dataset_root, 'fingerprint': config_fingerprint(cfg), 'sequences': entries}
    atomic_write_text(os.path.join(cfg.dataset_root, MANIFEST_FILE), _json(manifest))
    logger.info(f"[DATA] Generated {len(entries)} sequences under {cfg.dataset_root}")
    return manifest


# ---------------------------------------------------------------------------
# train

def sequence_samples(seq: RadarSequence, annotations: Sequence[ObjectAnnotation], cfg: PipelineConfig) -> List[MixSample]:
    """Sliding-window snippets of a labelled sequence with their encoded ConfMaps."""
    if seq.scene is None:
        raise DataError(f"sequence {seq.sequence_id} has no scene label")
    samples = []
    for snippet in slice_snippets(seq, cfg.window, cfg.stride):
        confmap = encode_confmap(annotations_in_window(annotations, snippet.start_frame, cfg.window),
                                 cfg.window, seq.grid_size, cfg.sigmas)
        samples.append(MixSample(snippet, confmap, seq.scene))
    return samples


def load_labelled(cfg: PipelineConfig) -> List[Tuple[RadarSequence, List[ObjectAnnotation]]]:
    dataset = load_dataset(cfg.dataset_root)
    for seq, annotations in dataset:
        if annotations is None:
            raise DataError(f"sequence {seq.sequence_id} has no {ANNOTATIONS_FILE}")
        if seq.grid_size != cfg.grid.grid_size:
            raise DataError(f"sequence {seq.sequence_id} has grid {seq.grid_size}, configuration says "
                            f"{cfg.grid.grid_size}")
    scenes = {seq.scene for seq, _ in dataset}
    missing = [s.value for s in SCENE_ORDER if s not in scenes]
    if missing:
        raise DataError(f"dataset {cfg.dataset_root} has no sequences of scene {missing}")
    return dataset


def split_dataset(cfg: PipelineConfig, dataset):
    train_ids, val_ids = split_sequences({seq.sequence_id: seq.scene for seq, _ in dataset}, cfg.val_fraction, cfg.seed)
    train_ids, val_ids = set(train_ids), set(val_ids)
    return ([item for item in dataset if item[0].sequence_id in train_ids],
            [item for item in dataset if item[0].sequence_id in val_ids])


def _samples(cfg, items) -> List[MixSample]:
    return [s for seq, ann in items for s in sequence_samples(seq, ann, cfg)]


def _of_scene(samples: Sequence[MixSample], scene: SceneLabel) -> List[MixSample]:
    return [s for s in samples if s.scene is scene]


def train_detector_stages(cfg: PipelineConfig, arch: ArchSpec, train: Sequence[MixSample], val: Sequence[MixSample],
                          plan: TrainPlan, resume: bool = True,
                          save: bool = True) -> Tuple[Dict[Stage, ModelCheckpoint], List]:
    """Universal model then one fine-tuned branch per scene."""
    fingerprint = config_fingerprint(cfg)
    history = []

    def tagged(rows, stage):
        return [HistoryRow(row.epoch, f"{stage.value}/{arch.name}", row.lr, row.train_loss, row.val_loss)
                for row in rows]

    ckpts: Dict[Stage, ModelCheckpoint] = {}
    universal_path = checkpoint_path(cfg, Stage.UNIVERSAL, arch)
    if save and resume and os.path.exists(universal_path):
        logger.info(f"[TRAIN] Resuming from existing universal checkpoint {universal_path}")
        ckpts[Stage.UNIVERSAL] = load_checkpoint(universal_path, fingerprint)
        if ckpts[Stage.UNIVERSAL].stage is not Stage.UNIVERSAL:
            raise CheckpointError(f"{universal_path} is not a universal checkpoint")
    else:
        ckpt, rows = train_universal(train, plan, arch, val, fingerprint)
        ckpts[Stage.UNIVERSAL] = ckpt
        history += tagged(rows, Stage.UNIVERSAL)
        if save:
            save_checkpoint(ckpt, universal_path)
    for scene in SCENE_ORDER:
        stage = Stage.for_scene(scene)
        ckpt, rows = finetune(ckpts[Stage.UNIVERSAL], _of_scene(train, scene), plan, scene,
                              _of_scene(val, scene) or None, fingerprint)
        ckpts[stage] = ckpt
        history += tagged(rows, stage)
        if save:
            save_checkpoint(ckpt, checkpoint_path(cfg, stage, arch))
    return ckpts, history


def cmd_train(cfg: PipelineConfig, resume: bool = True) -> Dict[str, str]:
    """Trains every configured detector (universal + both branches) and the scene classifier."""
    dataset = load_labelled(cfg)
    train_items, val_items = split_dataset(cfg, dataset)
    train, val = _samples(cfg, train_items), _samples(cfg, val_items)
    missing = [s.value for s in SCENE_ORDER if not _of_scene(train, s)]
    if missing:
        raise DataError(f"training split has no snippets of scene {missing}")
    logger.info(f"[TRAIN] {len(train)} training and {len(val)} validation snippets from "
                f"{len(train_items)}/{len(val_items)} sequences")

    outputs, history = {}, []
    for arch in cfg.detectors:
        ckpts, rows = train_detector_stages(cfg, arch, train, val, cfg.train, resume)
        history += rows
        for stage in ckpts:
            outputs[f"{stage.value}/{arch.name}"] = checkpoint_path(cfg, stage, arch)

    ckpt, rows, report = train_classifier([s.snippet for s in train], cfg.train, cfg.classifier,
                                          [s.snippet for s in val], config_fingerprint(cfg))
    history += rows
    outputs[Stage.CLASSIFIER.value] = save_checkpoint(ckpt, checkpoint_path(cfg, Stage.CLASSIFIER))
    outputs['classifier_report'] = atomic_write_text(os.path.join(cfg.output_dir, 'classifier_report.json'),
                                                     _json(report.to_dict()))
    outputs['history'] = write_history_csv(os.path.join(cfg.output_dir, HISTORY_FILE), history)
    logger.info(f"[TRAIN] Wrote {sum(1 for k in outputs if '/' in k or k == 'classifier')} checkpoints")
    return outputs


# ---------------------------------------------------------------------------
# infer

def sequence_confmap(seq: RadarSequence, branches: Sequence[ModelCheckpoint], cfg: PipelineConfig,
                     models: Optional[Sequence[SLNetModel]] = None) -> ConfMap:
    """Ensembles the branches on every window, then averages overlapping windows."""
    snippets = slice_snippets(seq, cfg.window, cfg.stride)
    models = models or [ckpt.to_model() for ckpt in branches]
    per_model = [predict_confmaps(ckpt, snippets, cfg.train.batch_size, model) for ckpt, model in zip(branches, models)]
    windows = [(snip.start_frame, ensemble_confmaps([maps[k] for maps in per_model]))
               for k, snip in enumerate(snippets)]
    return merge_windows(windows, seq.num_frames)


def detect(seq: RadarSequence, branches: Sequence[ModelCheckpoint], scene: SceneLabel, cfg: PipelineConfig,
           postproc: bool = True) -> Tuple[List[Detection], List[Detection], ConfMap]:
    """Returns (final detections, raw L-NMS detections, merged ConfMap)."""
    confmap = sequence_confmap(seq, branches, cfg)
    policy = cfg.policy_for(scene)
    raw = decode_frames(confmap, policy, cfg.grid, cfg.ols)
    final = apply_constraints(raw, scene, policy, cfg.grid, cfg.ols) if postproc else raw
    return [d for dets in final for d in dets], [d for dets in raw for d in dets], confmap


def load_branches(cfg: PipelineConfig, stage: Stage) -> List[ModelCheckpoint]:
    fingerprint = config_fingerprint(cfg)
    branches = []
    for arch in cfg.detectors:
        path = checkpoint_path(cfg, stage, arch)
        if not os.path.exists(path):
            raise CheckpointError(f"missing {stage.value} checkpoint for {arch.name}: {path}")
        branches.append(load_checkpoint(path, fingerprint))
    return branches


def cmd_infer(cfg: PipelineConfig, sequence_path: str, out_dir: Optional[str] = None,
              scene: Optional[str] = None, postproc: bool = True) -> Dict:
    """Scene routing, branch ensemble, window merge and post-processing for one sequence."""
    seq, _ = read_sequence(sequence_path)
    out_dir = out_dir or os.path.join(cfg.output_dir, 'detections')
    snippets = slice_snippets(seq, cfg.window, cfg.stride)

    override = SceneLabel.parse(scene)
    predicted, votes = None, {}
    classifier_path = checkpoint_path(cfg, Stage.CLASSIFIER)
    if override is None or os.path.exists(classifier_path):
        classifier = load_checkpoint(classifier_path, config_fingerprint(cfg))
        labels = classify_snippets(classifier, snippets, cfg.train.batch_size)
        predicted = majority_vote(labels)
        votes = {s.value: sum(1 for label in labels if label is s) for s in SCENE_ORDER}
    used = override or predicted
    logger.info(f"[INFER] {seq.sequence_id}: predicted scene {predicted.value if predicted else 'n/a'}, "
                f"using {used.value}")

    branches = load_branches(cfg, Stage.for_scene(used))
    final, raw, confmap = detect(seq, branches, used, cfg, postproc)
    det_path = write_detections_csv(os.path.join(out_dir, f"{seq.sequence_id}.csv"), final)
    confmap_path = write_tensor(os.path.join(out_dir, f"{seq.sequence_id}_confmap.rdt"), confmap.data)

    key = lambda d: (d.frame_index, d.class_id, d.range_idx, d.azimuth_idx)
    raw_keys, final_keys = {key(d) for d in raw}, {key(d) for d in final}
    manifest = {
        'sequence_id': seq.sequence_id,
        'predicted_scene': predicted.value if predicted else None,
        'scene': used.value,
        'snippet_votes': votes,
        'architectures': [a.name for a in cfg.detectors],
        'postprocessing': postproc,
        'detections': det_path,
        'confmap': confmap_path,
        'num_detections': len(final),
        'num_peaks': len(raw),
        'removed_by_constraints': len(raw_keys - final_keys),
        'added_by_constraints': len(final_keys - raw_keys),
    }
    atomic_write_text(os.path.join(out_dir, f"{seq.sequence_id}_manifest.json"), _json(manifest))
    return manifest


# ---------------------------------------------------------------------------
# eval

def _ground_truth(cfg: PipelineConfig, path: str):
    """(annotations, scenes, frame counts) per sequence, from a dataset root or one sequence directory."""
    if os.path.isfile(os.path.join(path, 'meta.json')):
        items = [read_sequence(path)]
    else:
        items = load_dataset(path)
    gts, scenes, frames = {}, {}, {}
    for seq, annotations in items:
        if annotations is None:
            raise DataError(f"sequence {seq.sequence_id} has no {ANNOTATIONS_FILE}")
        gts[seq.sequence_id] = annotations
        scenes[seq.sequence_id] = seq.scene
        frames[seq.sequence_id] = seq.num_frames
    return gts, scenes, frames


def cmd_eval(cfg: PipelineConfig, detections_path: str, ground_truth_path: str,
             out_dir: Optional[str] = None, compare: Optional[str] = None) -> EvalReport:
    gts, scenes, frames = _ground_truth(cfg, ground_truth_path)
    dets = {}
    if os.path.isfile(detections_path):
        if len(gts) != 1:
            raise DataError("a single detection CSV needs a single ground-truth sequence")
        dets[next(iter(gts))] = read_detections_csv(detections_path, cfg.grid.grid_size, len(cfg.classes))
    else:
        for seq_id in gts:
            csv_path = os.path.join(detections_path, f"{seq_id}.csv")
            if os.path.exists(csv_path):
                dets[seq_id] = read_detections_csv(csv_path, cfg.grid.grid_size, len(cfg.classes))
            else:
                logger.warning(f"[EVAL] No detections file {csv_path}; scoring {seq_id} as zero detections")
                dets[seq_id] = []
    report = evaluate(dets, gts, scenes, cfg.grid, cfg.ols, cfg.thresholds, frames)
    out_dir = out_dir or os.path.join(cfg.output_dir, 'eval')
    write_report_json(os.path.join(out_dir, 'report.json'), report)
    write_report_csv(os.path.join(out_dir, 'report.csv'), report)
    if compare:
        rows = compare_reports(read_report_json(compare), report)
        write_table_csv(os.path.join(out_dir, 'compare.csv'), rows, COMPARE_HEADER)
        atomic_write_text(os.path.join(out_dir, 'compare.json'), _json(rows))
        logger.info(f"[EVAL] Comparison against {compare}:\n{format_table(rows, COMPARE_HEADER)}")
    return report


# ---------------------------------------------------------------------------
# render

def cmd_render(cfg: PipelineConfig, sequence_path: str, out_dir: Optional[str] = None, start: int = 0,
               stop: Optional[int] = None, confmap_path: Optional[str] = None,
               detections_path: Optional[str] = None) -> List[str]:
    seq, _ = read_sequence(sequence_path)
    confmap = ConfMap(read_tensor(confmap_path)) if confmap_path else None
    detections = read_detections_csv(detections_path, seq.grid_size) if detections_path else ()
    out_dir = out_dir or os.path.join(cfg.output_dir, 'render', seq.sequence_id)
    return render_sequence(seq, out_dir, start, stop, confmap, detections, cfg.render_scale)


def cmd_augment_preview(cfg: PipelineConfig, sequence_path: str, partner_path: str,
                        out_dir: Optional[str] = None, lam: float = 0.5) -> List[str]:
    """Before/after renders of the first snippet under each SceneMix operation."""
    seq, annotations = read_sequence(sequence_path)
    partner_seq, partner_annotations = read_sequence(partner_path)
    if annotations is None or partner_annotations is None:
        raise DataError("augment preview needs annotated sequences")
    sample = sequence_samples(seq, annotations, cfg)[0]
    partner = sequence_samples(partner_seq, partner_annotations, cfg)[0]
    policy = cfg.train.augment
    _, _, width, height = sample.snippet.data.shape
    region = random_crop_region(width, height, policy.crop_area_range, policy.rng_for(0))
    variants = [('original', sample), ('partner', partner), ('videomix', video_mix(sample, partner, lam)),
                ('videocropmix', video_crop_mix(sample, partner, region)),
                ('noisemix', noise_mix(sample, partner, policy.noise_threshold))]
    out_dir = out_dir or os.path.join(cfg.output_dir, 'augment_preview', seq.sequence_id)
    paths = []
    for name, variant in variants:
        frame = variant.snippet.data[:, 0]
        paths.append(save_image(render_ramap(frame, cfg.render_scale), os.path.join(out_dir, f"{name}_rf.pgm")))
        paths.append(save_image(render_confmap(variant.confmap.data[:, 0], (), cfg.render_scale),
                                os.path.join(out_dir, f"{name}_confmap.ppm")))
    logger.info(f"[AUGMENT] Wrote {len(paths)} preview images to {out_dir}")
    return paths


# ---------------------------------------------------------------------------
# ablation

def _ablation_row(name: str, report: EvalReport) -> Dict:
    scene = lambda s, metric: getattr(report.per_scene[s], metric) if s in report.per_scene else float('nan')
    return {'row': name, 'AP': report.ap, 'AR': report.ar,
            'AP_static': scene('static', 'ap'), 'AP_dynamic': scene('dynamic', 'ap'),
            'AR_static': scene('static', 'ar'), 'AR_dynamic': scene('dynamic', 'ar')}


def _evaluate_routing(cfg, items, route) -> EvalReport:
    dets, gts, scenes, frames = {}, {}, {}, {}
    for seq, annotations in items:
        final, _, _ = detect(seq, [route(seq.scene)], seq.scene, cfg)
        dets[seq.sequence_id], gts[seq.sequence_id] = final, annotations
        scenes[seq.sequence_id], frames[seq.sequence_id] = seq.scene, seq.num_frames
    return evaluate(dets, gts, scenes, cfg.grid, cfg.ols, cfg.thresholds, frames)


def cmd_ablation(cfg: PipelineConfig, arch_index: int = 0) -> List[Dict]:
    """Vanilla vs SceneMix vs SceneMix with per-scene fine-tuning, scored on validation sequences."""
    if not 0 <= arch_index < len(cfg.detectors):
        raise DataError(f"architecture index {arch_index} outside the {len(cfg.detectors)} configured detectors")
    arch = cfg.detectors[arch_index]
    dataset = load_labelled(cfg)
    train_items, val_items = split_dataset(cfg, dataset)
    if not val_items:
        raise DataError("ablation needs validation sequences; raise training.val_fraction")
    train, val = _samples(cfg, train_items), _samples(cfg, val_items)

    vanilla_plan = replace(cfg.train, augment=AugmentPolicy.disabled(cfg.seed))
    vanilla, _ = train_universal(train, vanilla_plan, arch, val, config_fingerprint(cfg))
    mixed, _ = train_detector_stages(cfg, arch, train, val, cfg.train, resume=False, save=False)

    rows = [
        _ablation_row('vanilla', _evaluate_routing(cfg, val_items, lambda s: vanilla)),
        _ablation_row('scenemix', _evaluate_routing(cfg, val_items, lambda s: mixed[Stage.UNIVERSAL])),
        _ablation_row('scenemix+finetune', _evaluate_routing(cfg, val_items, lambda s: mixed[Stage.for_scene(s)])),
    ]
    out_dir = os.path.join(cfg.output_dir, 'ablation')
    write_table_csv(os.path.join(out_dir, 'ablation.csv'), rows, ABLATION_HEADER)
    atomic_write_text(os.path.join(out_dir, 'ablation.json'), _json({'architecture': arch.name, 'rows': rows}))
    logger.info(f"[EVAL] Ablation for {arch.name}:\n{format_table(rows, ABLATION_HEADER)}")
    return rows
