"""Pipeline configuration: YAML file -> validated dataclasses."""
import os
import json
import math
import hashlib
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, Optional, Tuple

import yaml

from .confmap_codec import DEFAULT_SIGMAS, sigmas_from_mapping
from .errors import ConfigError
from .evaluator import DEFAULT_THRESHOLDS, validate_thresholds
from .geometry import DEFAULT_KAPPA, OlsParams, PolarGrid
from .postproc import PostprocPolicy
from .radar_data import DEFAULT_CLASSES, SceneLabel
from .scenemix import AugmentPolicy
from .slnet_models import ArchSpec, ArchVariant
from .training import TrainPlan

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = os.path.join('config', 'config.yaml')

KNOWN_SECTIONS = ('seed', 'output_dir', 'dataset_root', 'logging', 'grid', 'classes', 'kappa', 'sigmas', 'window',
                  'models', 'training', 'augment', 'postproc', 'evaluation', 'generator', 'render')


@dataclass(frozen=True)
class GeneratorSettings:
    static: int = 4
    dynamic: int = 4
    num_frames: int = 64
    num_objects: int = 2
    noise_floor: float = 0.05
    clutter_level: float = 4.0
    ego_drift: float = 1.0

    def __post_init__(self):
        if self.static < 0 or self.dynamic < 0:
            raise ConfigError("generator counts must be >= 0")
        if self.num_frames < 1:
            raise ConfigError(f"generator.num_frames must be >= 1, got {self.num_frames}")


@dataclass(frozen=True)
class PipelineConfig:
    config_path: str
    output_dir: str
    dataset_root: str
    seed: int = 0
    log_level: str = 'INFO'
    grid: PolarGrid = field(default_factory=PolarGrid)
    classes: Tuple[str, ...] = DEFAULT_CLASSES
    ols: OlsParams = field(default_factory=OlsParams)
    sigmas: Tuple[float, ...] = DEFAULT_SIGMAS
    window: int = 16
    stride: int = 8
    detectors: Tuple[ArchSpec, ...] = ()
    classifier: Optional[ArchSpec] = None
    train: TrainPlan = field(default_factory=TrainPlan)
    val_fraction: float = 0.25
    postproc: Dict[SceneLabel, PostprocPolicy] = field(default_factory=dict)
    thresholds: Tuple[float, ...] = DEFAULT_THRESHOLDS
    generator: GeneratorSettings = field(default_factory=GeneratorSettings)
    render_scale: int = 1

    def policy_for(self, scene: SceneLabel) -> PostprocPolicy:
        return self.postproc[SceneLabel.parse(scene)]

    def with_seed(self, seed: int) -> 'PipelineConfig':
        return replace(self, seed=seed, train=replace(self.train, seed=seed,
                                                      augment=replace(self.train.augment, rng_seed=seed)))


def config_fingerprint(cfg: PipelineConfig) -> str:
    """SHA-256 over the fields that shape data and model inputs."""
    g = cfg.grid
    payload = {
        'grid': [g.range_min, g.range_max, g.azimuth_min, g.azimuth_max, g.grid_size],
        'classes': list(cfg.classes),
        'window': cfg.window,
        'sigmas': list(cfg.sigmas),
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode('utf-8')).hexdigest()


def _cast(value: Any, caster: Callable, where: str):
    try:
        if caster is bool and not isinstance(value, bool):
            raise ValueError(f"expected true/false, got {value!r}")
        if caster is int and isinstance(value, float) and not value.is_integer():
            raise ValueError(f"expected an integer, got {value!r}")
        return caster(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}")


class _Section:
    """Typed reads from one mapping, warning about keys nobody asked for."""

    def __init__(self, raw: Any, name: str):
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(f"section '{name}' must be a mapping, got {type(raw).__name__}")
        self.raw, self.name, self.used = raw, name, set()

    def get(self, key: str, default, caster: Callable = lambda v: v):
        self.used.add(key)
        if key not in self.raw or self.raw[key] is None:
            return default
        return _cast(self.raw[key], caster, f"{self.name}.{key}")

    def sub(self, key: str) -> '_Section':
        self.used.add(key)
        return _Section(self.raw.get(key), f"{self.name}.{key}")

    def warn_unknown(self) -> None:
        for key in sorted(set(self.raw) - self.used):
            logger.warning(f"[CONFIG] Ignoring unknown key {self.name}.{key}")


def _resolve(path: str, project_root: str) -> str:
    return path if os.path.isabs(path) else os.path.abspath(os.path.join(project_root, path))


def _grid(section: _Section) -> PolarGrid:
    fov = section.get('azimuth_fov_deg', 120.0, float)
    grid = PolarGrid(section.get('range_min', 1.0, float), section.get('range_max', 25.0, float),
                     -math.radians(fov) / 2.0, math.radians(fov) / 2.0, section.get('size', 128, int))
    section.warn_unknown()
    return grid


def _arch(entry: Any, where: str, window: int, grid_size: int, num_classes: int, batch_norm: bool,
          variant: Optional[str] = None) -> ArchSpec:
    section = _Section(entry, where)
    arch = ArchSpec(variant or section.get('variant', ArchVariant.C21D.value, str),
                    section.get('width', 1.0, float), window, grid_size, num_classes,
                    batch_norm=section.get('batch_norm', batch_norm, bool))
    section.warn_unknown()
    return arch


def _postproc(section: _Section, scene: SceneLabel) -> PostprocPolicy:
    policy = PostprocPolicy(
        peak_threshold=section.get('peak_threshold', 0.1, float),
        nms_ols_threshold=section.get('nms_ols_threshold', 0.3, float),
        collision_ols_threshold=section.get('collision_ols_threshold', 0.6, float),
        max_gap=section.get('max_gap', 2, int),
        border_margin=section.get('border_margin', 10, int),
        track_ols_threshold=section.get('track_ols_threshold', 0.5, float),
        existence_factor=section.get('existence_factor', 3, int),
        scene=scene,
    )
    section.warn_unknown()
    return policy


def config_from_mapping(raw: Dict, config_path: str) -> PipelineConfig:
    """Builds and validates the typed configuration from a parsed YAML mapping."""
    top = _Section(raw, '<root>')
    project_root = os.path.dirname(os.path.dirname(os.path.abspath(config_path)))

    seed = top.get('seed', 0, int)
    if not 0 <= seed < 2 ** 64:
        raise ConfigError(f"seed must fit in 64 bits, got {seed}")
    output_dir = _resolve(top.get('output_dir', 'output', str), project_root)
    dataset_root = _resolve(top.get('dataset_root', os.path.join('data', 'synthetic'), str), project_root)

    log_section = top.sub('logging')
    log_level = log_section.get('level', 'INFO', str).upper()
    if log_level not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
        raise ConfigError(f"logging.level must be a standard level name, got {log_level}")
    log_section.warn_unknown()

    grid = _grid(top.sub('grid'))
    classes = tuple(top.get('classes', list(DEFAULT_CLASSES), list))
    if not classes or len(set(classes)) != len(classes):
        raise ConfigError(f"classes must be a non-empty list of distinct names, got {classes}")

    kappa_table = top.get('kappa', dict(zip(DEFAULT_CLASSES, DEFAULT_KAPPA)), dict)
    ols_params = OlsParams.from_mapping(kappa_table, classes)
    sigmas = sigmas_from_mapping(top.get('sigmas', dict(zip(DEFAULT_CLASSES, DEFAULT_SIGMAS)), dict), classes)

    window_section = top.sub('window')
    window = window_section.get('length', 16, int)
    stride = window_section.get('stride', max(window // 2, 1), int)
    if window < 1 or stride < 1:
        raise ConfigError(f"window.length and window.stride must be >= 1, got {window}, {stride}")
    window_section.warn_unknown()

    models = top.sub('models')
    batch_norm = models.get('batch_norm', True, bool)
    detector_entries = models.get('detectors', [{'variant': 'c21d', 'width': 1.0}], list)
    if not detector_entries:
        raise ConfigError("models.detectors must list at least one architecture")
    detectors = tuple(_arch(entry, f"models.detectors[{i}]", window, grid.grid_size, len(classes), batch_norm)
                      for i, entry in enumerate(detector_entries))
    if any(not a.is_detector for a in detectors):
        raise ConfigError("models.detectors may only hold c21d, r18d or r18uc")
    if len({a.name for a in detectors}) != len(detectors):
        raise ConfigError("models.detectors holds the same architecture and width twice")
    classifier = _arch(models.get('classifier', {}, dict), 'models.classifier', window, grid.grid_size,
                       len(classes), batch_norm, variant=ArchVariant.CLASSIFIER.value)
    models.warn_unknown()

    aug = top.sub('augment')
    augment = AugmentPolicy(
        p_videomix=aug.get('p_videomix', 1.0 / 3.0, float),
        p_videocropmix=aug.get('p_videocropmix', 1.0 / 3.0, float),
        p_noisemix=aug.get('p_noisemix', 0.5, float),
        noise_threshold=aug.get('noise_threshold', 0.2, float),
        rng_seed=seed,
        crop_area_range=(aug.get('crop_area_min', 0.1, float), aug.get('crop_area_max', 0.5, float)),
    )
    if not aug.get('enabled', True, bool):
        augment = AugmentPolicy.disabled(seed)
    aug.warn_unknown()

    tr = top.sub('training')
    train = TrainPlan(
        epochs_universal=tr.get('epochs_universal', 50, int),
        epochs_finetune=tr.get('epochs_finetune', 30, int),
        epochs_classifier=tr.get('epochs_classifier', 20, int),
        batch_size=tr.get('batch_size', 4, int),
        lr=tr.get('lr', 1e-4, float),
        warmup_fraction=tr.get('warmup_fraction', 0.05, float),
        cycles=tr.get('cycles', 1, int),
        cycle_mult=tr.get('cycle_mult', 1.0, float),
        min_lr_fraction=tr.get('min_lr_fraction', 0.01, float),
        augment=augment,
        seed=seed,
    )
    val_fraction = tr.get('val_fraction', 0.25, float)
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError(f"training.val_fraction must lie in [0, 1), got {val_fraction}")
    tr.warn_unknown()

    pp = top.sub('postproc')
    postproc = {scene: _postproc(pp.sub(scene.value), scene) for scene in SceneLabel}
    pp.warn_unknown()

    ev = top.sub('evaluation')
    thresholds = validate_thresholds(ev.get('thresholds', list(DEFAULT_THRESHOLDS), list))
    ev.warn_unknown()

    gen = top.sub('generator')
    generator = GeneratorSettings(
        static=gen.get('static', 4, int), dynamic=gen.get('dynamic', 4, int),
        num_frames=gen.get('num_frames', 64, int), num_objects=gen.get('num_objects', 2, int),
        noise_floor=gen.get('noise_floor', 0.05, float), clutter_level=gen.get('clutter_level', 4.0, float),
        ego_drift=gen.get('ego_drift', 1.0, float),
    )
    gen.warn_unknown()

    render = top.sub('render')
    render_scale = render.get('scale', 1, int)
    if render_scale < 1:
        raise ConfigError(f"render.scale must be >= 1, got {render_scale}")
    render.warn_unknown()

    top.warn_unknown()
    return PipelineConfig(os.path.abspath(config_path), output_dir, dataset_root, seed, log_level, grid, classes,
                          ols_params, sigmas, window, stride, detectors, classifier, train, val_fraction, postproc,
                          thresholds, generator, render_scale)


def load_config(config_path: str, seed: Optional[int] = None) -> PipelineConfig:
    """Loads configuration from a YAML file; ``seed`` overrides the file's seed."""
    logger.info(f"[CONFIG] Loading configuration from {config_path}")
    try:
        with open(config_path, 'r', encoding='utf-8') as f:
            raw = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError(f"configuration file not found: {config_path}")
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse configuration file {config_path}: {e}")
    cfg = config_from_mapping(raw if raw is not None else {}, config_path)
    if seed is not None:
        if not 0 <= seed < 2 ** 64:
            raise ConfigError(f"seed must fit in 64 bits, got {seed}")
        cfg = cfg.with_seed(seed)
    logger.info(f"[CONFIG] Output directory: {cfg.output_dir}; dataset: {cfg.dataset_root}; seed {cfg.seed}")
    return cfg
