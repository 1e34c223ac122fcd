"""SceneMix: VideoMix, VideoCropMix and NoiseMix between snippets of the same scene."""
import math
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .radar_data import ConfMap, RadarSnippet, SceneLabel

logger = logging.getLogger(__name__)

MIX_NONE = 'identity'
MIX_VIDEO = 'videomix'
MIX_CROP = 'videocropmix'


@dataclass(frozen=True, eq=False)
class MixSample:
    snippet: RadarSnippet
    confmap: ConfMap
    scene: SceneLabel

    def __post_init__(self):
        scene = SceneLabel.parse(self.scene)
        if scene is None:
            raise DataError("MixSample needs a known scene")
        object.__setattr__(self, 'scene', scene)
        if self.snippet.data.shape[1:] != self.confmap.data.shape[1:]:
            raise ShapeError(f"snippet {self.snippet.data.shape} and ConfMap {self.confmap.data.shape} "
                             f"disagree on (T, W, H)")

    def replace(self, snippet_data: np.ndarray, confmap_data: Optional[np.ndarray] = None) -> 'MixSample':
        """Same identity metadata, new tensors."""
        snippet = RadarSnippet(snippet_data, self.snippet.source_sequence, self.snippet.start_frame, self.scene)
        confmap = self.confmap if confmap_data is None else ConfMap(confmap_data)
        return MixSample(snippet, confmap, self.scene)


@dataclass(frozen=True)
class CropRegion:
    """Half-open spatial rectangle [az_start, az_stop) x [range_start, range_stop)."""
    az_start: int
    az_stop: int
    range_start: int
    range_stop: int

    def check(self, width: int, height: int) -> None:
        if not (0 <= self.az_start <= self.az_stop <= width and 0 <= self.range_start <= self.range_stop <= height):
            raise DataError(f"crop region {self} outside grid ({width}, {height})")

    @property
    def area(self) -> int:
        return (self.az_stop - self.az_start) * (self.range_stop - self.range_start)


@dataclass(frozen=True)
class AugmentPolicy:
    p_videomix: float = 1.0 / 3.0
    p_videocropmix: float = 1.0 / 3.0
    p_noisemix: float = 0.5
    noise_threshold: float = 0.2
    rng_seed: int = 0
    crop_area_range: tuple = (0.1, 0.5)

    def __post_init__(self):
        for name in ('p_videomix', 'p_videocropmix', 'p_noisemix'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if self.p_videomix + self.p_videocropmix > 1.0 + 1e-12:
            raise ConfigError("p_videomix + p_videocropmix must not exceed 1")
        if not 0.0 < self.noise_threshold < 1.0:
            raise ConfigError(f"noise_threshold must lie in (0, 1), got {self.noise_threshold}")
        lo, hi = self.crop_area_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigError(f"crop_area_range must satisfy 0 < lo <= hi <= 1, got {self.crop_area_range}")

    @classmethod
    def disabled(cls, rng_seed: int = 0) -> 'AugmentPolicy':
        return cls(0.0, 0.0, 0.0, rng_seed=rng_seed)

    @property
    def enabled(self) -> bool:
        return self.p_videomix > 0 or self.p_videocropmix > 0 or self.p_noisemix > 0

    def rng_for(self, sample_index: int) -> np.random.Generator:
        """Per-sample stream derived from (rng_seed, sample_index)."""
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.rng_seed, sample_index])))


def _check_pair(a: MixSample, b: MixSample) -> None:
    if a.scene is not b.scene:
        raise DataError(f"only snippets of the same scene are mixed ({a.scene.value} vs {b.scene.value})")
    if a.snippet.data.shape != b.snippet.data.shape or a.confmap.data.shape != b.confmap.data.shape:
        raise ShapeError(f"cannot mix shapes {a.snippet.data.shape}/{a.confmap.data.shape} with "
                         f"{b.snippet.data.shape}/{b.confmap.data.shape}")


def video_mix(a: MixSample, b: MixSample, lam: float) -> MixSample:
    """Convex blend x = lam*x_a + (1-lam)*x_b, likewise for the ConfMaps."""
    _check_pair(a, b)
    if not 0.0 <= lam <= 1.0:
        raise DataError(f"lambda must lie in [0, 1], got {lam}")
    x = lam * a.snippet.data.astype(np.float64) + (1.0 - lam) * b.snippet.data.astype(np.float64)
    c = lam * a.confmap.data.astype(np.float64) + (1.0 - lam) * b.confmap.data.astype(np.float64)
    return a.replace(x.astype(np.float32), np.clip(c, 0.0, 1.0).astype(np.float32))


def video_crop_mix(a: MixSample, b: MixSample, region: CropRegion) -> MixSample:
    """a with the spatial rectangle replaced by b's values, on every frame and channel."""
    _check_pair(a, b)
    _, _, width, height = a.snippet.data.shape
    region.check(width, height)
    x = np.array(a.snippet.data)
    c = np.array(a.confmap.data)
    window = (slice(None), slice(None), slice(region.az_start, region.az_stop),
              slice(region.range_start, region.range_stop))
    x[window] = b.snippet.data[window]
    c[window] = b.confmap.data[window]
    return a.replace(x, c)


def extract_noise(sample: MixSample, threshold: float) -> np.ndarray:
    """The snippet with every object area (any class above threshold) zeroed."""
    mask = sample.confmap.data.max(axis=0) > threshold
    noise = np.array(sample.snippet.data)
    noise[:, mask] = 0.0
    return noise


def noise_mix(target: MixSample, noise_source: MixSample, threshold: float) -> MixSample:
    """Adds noise_source's background to target; target's ConfMap is kept as is."""
    _check_pair(target, noise_source)
    x = target.snippet.data + extract_noise(noise_source, threshold)
    return target.replace(x)


def random_crop_region(width: int, height: int, area_range, rng: np.random.Generator) -> CropRegion:
    fraction = rng.uniform(*area_range)
    side_a = min(width, max(1, int(round(math.sqrt(fraction) * width))))
    side_r = min(height, max(1, int(round(math.sqrt(fraction) * height))))
    a0 = int(rng.integers(0, width - side_a + 1))
    r0 = int(rng.integers(0, height - side_r + 1))
    return CropRegion(a0, a0 + side_a, r0, r0 + side_r)


@dataclass(frozen=True)
class AugmentChoice:
    mix: str
    noise: bool


def choose_augmentations(policy: AugmentPolicy, rng: np.random.Generator) -> AugmentChoice:
    """VideoMix and VideoCropMix are exclusive; NoiseMix is drawn independently."""
    u = rng.random()
    if u < policy.p_videomix:
        mix = MIX_VIDEO
    elif u < policy.p_videomix + policy.p_videocropmix:
        mix = MIX_CROP
    else:
        mix = MIX_NONE
    return AugmentChoice(mix, bool(rng.random() < policy.p_noisemix))


PoolFn = Callable[[SceneLabel, np.random.Generator], MixSample]


class ScenePool:
    """Serves random samples of a requested scene."""

    def __init__(self, samples: Sequence[MixSample]):
        self._by_scene: Dict[SceneLabel, List[MixSample]] = {}
        for sample in samples:
            self._by_scene.setdefault(sample.scene, []).append(sample)

    def scenes(self):
        return sorted(self._by_scene, key=lambda s: s.value)

    def __call__(self, scene: SceneLabel, rng: np.random.Generator) -> MixSample:
        candidates = self._by_scene.get(scene)
        if not candidates:
            raise DataError(f"no samples of scene {scene.value} in the pool")
        return candidates[int(rng.integers(len(candidates)))]


def _draw_partner(pool: PoolFn, sample: MixSample, rng: np.random.Generator) -> MixSample:
    partner = pool(sample.scene, rng)
    if partner.scene is not sample.scene:
        raise DataError(f"pool returned a {partner.scene.value} sample for a {sample.scene.value} request")
    return partner


def apply_policy(sample: MixSample, pool: PoolFn, policy: AugmentPolicy,
                 sample_index: int = 0, rng: Optional[np.random.Generator] = None) -> MixSample:
    """Applies one random SceneMix recipe; deterministic for (rng_seed, sample_index)."""
    rng = rng if rng is not None else policy.rng_for(sample_index)
    choice = choose_augmentations(policy, rng)
    result = sample
    if choice.mix == MIX_VIDEO:
        result = video_mix(sample, _draw_partner(pool, sample, rng), float(rng.random()))
    elif choice.mix == MIX_CROP:
        _, _, width, height = sample.snippet.data.shape
        region = random_crop_region(width, height, policy.crop_area_range, rng)
        result = video_crop_mix(sample, _draw_partner(pool, sample, rng), region)
    if choice.noise:
        result = noise_mix(result, _draw_partner(pool, sample, rng), policy.noise_threshold)
    logger.debug(f"[AUGMENT] sample {sample_index}: {choice.mix}, noisemix={choice.noise}")
    return result
