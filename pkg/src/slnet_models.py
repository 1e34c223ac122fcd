"""SLNet detectors (C21D, R18D, R18UC) and the snippet scene classifier.

Detectors map (N, C_RF, T, W, H) to sigmoid ConfMaps (N, C_cls, T, W, H). Every
encoder stage halves the spatial axes; the temporal axis is halved only where the
running length is even and above one, so short windows stay valid. Decoder stages
undo the mirrored encoder stage and add that stage's input feature back in.
"""
import logging
from enum import Enum
from dataclasses import dataclass, asdict
from collections import OrderedDict
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigError, ShapeError
from .neural_engine import (Add, BatchNorm, Block, Conv21dBlock, GlobalAvgPool, Layer, Linear, ReLU,
                            Sequential, Sigmoid, UpsampleNearest, conv3d_1x1, transposed_conv3d,
                            _check_finite, _check_mode)
from .radar_data import NUM_RF_CHANNELS, DEFAULT_CLASSES

logger = logging.getLogger(__name__)

C21D_WIDTHS = (64, 128, 256)
R18_WIDTHS = (64, 128, 256, 512)
BLOCKS_PER_STAGE = 2
NUM_SCENES = 2


class ArchVariant(Enum):
    C21D = 'c21d'
    R18D = 'r18d'
    R18UC = 'r18uc'
    CLASSIFIER = 'classifier'


@dataclass(frozen=True)
class ArchSpec:
    variant: ArchVariant = ArchVariant.C21D
    width: float = 1.0
    window: int = 16
    grid_size: int = 128
    num_classes: int = len(DEFAULT_CLASSES)
    in_channels: int = NUM_RF_CHANNELS
    batch_norm: bool = True

    def __post_init__(self):
        try:
            object.__setattr__(self, 'variant', ArchVariant(self.variant))
        except ValueError:
            raise ConfigError(f"unknown architecture {self.variant!r}; expected one of "
                              f"{[v.value for v in ArchVariant]}")
        if self.width <= 0:
            raise ConfigError(f"width multiplier must be positive, got {self.width}")
        if self.window < 1 or self.in_channels < 1 or self.num_classes < 1:
            raise ConfigError("window, in_channels and num_classes must all be >= 1")
        factor = 2 ** self.num_down_stages
        if self.grid_size < factor or self.grid_size % factor:
            raise ConfigError(f"{self.variant.value} needs a grid size divisible by {factor}, got {self.grid_size}")

    @property
    def num_down_stages(self) -> int:
        return len(C21D_WIDTHS) if self.variant is ArchVariant.C21D else len(R18_WIDTHS)

    @property
    def is_detector(self) -> bool:
        return self.variant is not ArchVariant.CLASSIFIER

    @property
    def name(self) -> str:
        return f"{self.variant.value}_w{self.width:g}"

    def channels(self, base: int) -> int:
        return max(1, int(round(base * self.width)))

    def temporal_strides(self) -> List[int]:
        """Temporal stride of each downsampling stage."""
        strides, t = [], self.window
        for _ in range(self.num_down_stages):
            if t > 1 and t % 2 == 0:
                strides.append(2)
                t //= 2
            else:
                strides.append(1)
        return strides

    def to_dict(self) -> dict:
        data = asdict(self)
        data['variant'] = self.variant.value
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'ArchSpec':
        return cls(**data)


# ---------------------------------------------------------------------------
# Building blocks

class BasicBlock(Block):
    """(2+1)D residual block: conv, BN, ReLU, conv, BN, plus shortcut, then ReLU."""

    def __init__(self, in_channels: int, out_channels: int, rng, stride=(1, 1, 1), batch_norm=True,
                 dtype=np.float32):
        super().__init__()
        self.add('conv1', Conv21dBlock(in_channels, out_channels, rng, stride=stride, batch_norm=batch_norm,
                                       dtype=dtype))
        self.add('bn1', BatchNorm(out_channels, dtype))
        self.add('relu1', ReLU())
        self.add('conv2', Conv21dBlock(out_channels, out_channels, rng, batch_norm=batch_norm, dtype=dtype))
        self.add('bn2', BatchNorm(out_channels, dtype))
        self.projected = in_channels != out_channels or tuple(stride) != (1, 1, 1)
        if self.projected:
            self.add('shortcut', conv3d_1x1(in_channels, out_channels, rng, stride=stride, bias=False, dtype=dtype))
            self.add('shortcut_bn', BatchNorm(out_channels, dtype))
        self.add('add', Add())
        self.add('relu2', ReLU())

    _main = ('conv1', 'bn1', 'relu1', 'conv2', 'bn2')

    def forward(self, x, mode='train'):
        _check_mode(mode)
        caches = {}
        h = x
        for name in self._main:
            h, caches[name] = self.children[name].forward(h, mode)
        s = x
        if self.projected:
            s, caches['shortcut'] = self.children['shortcut'].forward(s, mode)
            s, caches['shortcut_bn'] = self.children['shortcut_bn'].forward(s, mode)
        out, _ = self.children['add'].forward((h, s), mode)
        out, caches['relu2'] = self.children['relu2'].forward(out, mode)
        return out, caches

    def backward(self, caches, grad):
        grads = OrderedDict()
        g, _ = self.children['relu2'].backward(caches['relu2'], grad)
        g_main = g_short = g
        for name in reversed(self._main):
            g_main, layer_grads = self.children[name].backward(caches[name], g_main)
            self.merge_grads(grads, name, layer_grads)
        if self.projected:
            for name in ('shortcut_bn', 'shortcut'):
                g_short, layer_grads = self.children[name].backward(caches[name], g_short)
                self.merge_grads(grads, name, layer_grads)
        return g_main + g_short, grads


class Encoder(Block):
    """Runs its steps in order and exposes every step's output as a feature.

    ``levels`` records, per step, (output channels, temporal stride, spatial stride).
    """

    def __init__(self):
        super().__init__()
        self.levels: List[Tuple[int, int, int]] = []

    def add_step(self, name: str, layer: Layer, channels: int, t_stride: int, s_stride: int) -> None:
        self.add(name, layer)
        self.levels.append((channels, t_stride, s_stride))

    def forward(self, x, mode='train'):
        _check_mode(mode)
        features, caches = [], []
        for name, step in self.children.items():
            x, cache = step.forward(x, mode)
            _check_finite(x, f"forward of encoder.{name}")
            features.append(x)
            caches.append(cache)
        return features, caches

    def backward(self, caches, feature_grads):
        grads = OrderedDict()
        acc = None
        steps = list(self.children.items())
        for i in reversed(range(len(steps))):
            name, step = steps[i]
            g = feature_grads[i]
            if acc is not None:
                g = acc if g is None else g + acc
            if g is None:
                raise ShapeError(f"encoder step {name} received no gradient")
            acc, step_grads = step.backward(caches[i], g)
            self.merge_grads(grads, name, step_grads)
        return acc, grads


class UpStage(Block):
    """Upsampling layer, optional skip addition, ReLU."""

    def __init__(self, up: Layer, skip_index: Optional[int]):
        super().__init__()
        self.skip_index = skip_index
        self.add('up', up)
        self.add('add', Add())
        self.add('relu', ReLU())

    def forward(self, inputs, mode='train'):
        h, skip = inputs
        h, up_cache = self.children['up'].forward(h, mode)
        if skip is not None:
            h, _ = self.children['add'].forward((h, skip), mode)
        h, relu_cache = self.children['relu'].forward(h, mode)
        return h, (up_cache, relu_cache)

    def backward(self, cache, grad):
        up_cache, relu_cache = cache
        g, _ = self.children['relu'].backward(relu_cache, grad)
        g_skip = g if self.skip_index is not None else None
        g, up_grads = self.children['up'].backward(up_cache, g)
        grads = OrderedDict()
        self.merge_grads(grads, 'up', up_grads)
        return (g, g_skip), grads


def _c21d_encoder(arch: ArchSpec, rng, dtype) -> Encoder:
    encoder = Encoder()
    in_ch = arch.in_channels
    for i, (base, st) in enumerate(zip(C21D_WIDTHS, arch.temporal_strides())):
        ch = arch.channels(base)
        stage = Sequential()
        stage.add('conv_a', Conv21dBlock(in_ch, ch, rng, stride=(st, 2, 2), batch_norm=arch.batch_norm, dtype=dtype))
        stage.add('relu_a', ReLU())
        stage.add('conv_b', Conv21dBlock(ch, ch, rng, batch_norm=arch.batch_norm, dtype=dtype))
        stage.add('relu_b', ReLU())
        encoder.add_step(f"stage{i + 1}", stage, ch, st, 2)
        in_ch = ch
    return encoder


def _r18_encoder(arch: ArchSpec, rng, dtype) -> Encoder:
    encoder = Encoder()
    stem_ch = arch.channels(R18_WIDTHS[0])
    stem = Sequential()
    stem.add('conv', Conv21dBlock(arch.in_channels, stem_ch, rng, batch_norm=arch.batch_norm, dtype=dtype))
    stem.add('bn', BatchNorm(stem_ch, dtype))
    stem.add('relu', ReLU())
    encoder.add_step('stem', stem, stem_ch, 1, 1)
    in_ch = stem_ch
    for i, (base, st) in enumerate(zip(R18_WIDTHS, arch.temporal_strides())):
        ch = arch.channels(base)
        layer = Sequential()
        for b in range(BLOCKS_PER_STAGE):
            stride = (st, 2, 2) if b == 0 else (1, 1, 1)
            layer.add(f"block{b + 1}", BasicBlock(in_ch if b == 0 else ch, ch, rng, stride=stride,
                                                  batch_norm=arch.batch_norm, dtype=dtype))
        encoder.add_step(f"layer{i + 1}", layer, ch, st, 2)
        in_ch = ch
    return encoder


# ---------------------------------------------------------------------------
# Networks

class DetectorNet(Block):
    def __init__(self, arch: ArchSpec, rng, dtype=np.float32):
        super().__init__()
        encoder = _r18_encoder(arch, rng, dtype) if arch.variant in (ArchVariant.R18D, ArchVariant.R18UC) \
            else _c21d_encoder(arch, rng, dtype)
        self.add('encoder', encoder)
        decoder = Sequential()
        head_ch = arch.channels(C21D_WIDTHS[0]) // 2 or 1
        levels = encoder.levels
        in_ch = levels[-1][0]
        for j, i in enumerate(reversed(range(len(levels)))):
            _, t_stride, s_stride = levels[i]
            if s_stride == 1:
                continue
            skip = i - 1 if i >= 1 else None
            out_ch = levels[skip][0] if skip is not None else head_ch
            temporal_up = t_stride == 2
            if arch.variant is ArchVariant.R18UC:
                up = Sequential()
                up.add('upsample', UpsampleNearest((2 if temporal_up else 1, 2, 2)))
                up.add('conv', Conv21dBlock(in_ch, out_ch, rng, batch_norm=arch.batch_norm, dtype=dtype))
            else:
                up = transposed_conv3d(in_ch, out_ch, rng, temporal_up=temporal_up, dtype=dtype)
            decoder.add(f"up{j + 1}", UpStage(up, skip))
            in_ch = out_ch
        self.add('decoder', decoder)
        head = Sequential()
        head.add('conv', conv3d_1x1(in_ch, arch.num_classes, rng, dtype=dtype))
        head.add('sigmoid', Sigmoid())
        self.add('head', head)

    def forward(self, x, mode='train'):
        _check_mode(mode)
        features, enc_cache = self.children['encoder'].forward(x, mode)
        h = features[-1]
        dec_caches = []
        for name, stage in self.children['decoder'].children.items():
            skip = features[stage.skip_index] if stage.skip_index is not None else None
            h, cache = stage.forward((h, skip), mode)
            _check_finite(h, f"forward of decoder.{name}")
            dec_caches.append(cache)
        out, head_cache = self.children['head'].forward(h, mode)
        return out, (len(features), enc_cache, dec_caches, head_cache)

    def backward(self, cache, grad):
        num_features, enc_cache, dec_caches, head_cache = cache
        grads = OrderedDict()
        g, head_grads = self.children['head'].backward(head_cache, grad)
        self.merge_grads(grads, 'head', head_grads)
        feature_grads: List[Optional[np.ndarray]] = [None] * num_features
        decoder = self.children['decoder']
        stages = list(decoder.children.items())
        for (name, stage), stage_cache in zip(reversed(stages), reversed(dec_caches)):
            (g, g_skip), stage_grads = stage.backward(stage_cache, g)
            self.merge_grads(grads, f"decoder.{name}", stage_grads)
            if g_skip is not None:
                feature_grads[stage.skip_index] = g_skip
        feature_grads[-1] = g
        g, enc_grads = self.children['encoder'].backward(enc_cache, feature_grads)
        self.merge_grads(grads, 'encoder', enc_grads)
        return g, grads


class ClassifierNet(Block):
    def __init__(self, arch: ArchSpec, rng, dtype=np.float32):
        super().__init__()
        encoder = _r18_encoder(arch, rng, dtype)
        self.add('encoder', encoder)
        self.add('pool', GlobalAvgPool())
        self.add('fc', Linear(encoder.levels[-1][0], NUM_SCENES, rng, dtype))

    def forward(self, x, mode='train'):
        _check_mode(mode)
        features, enc_cache = self.children['encoder'].forward(x, mode)
        pooled, pool_cache = self.children['pool'].forward(features[-1], mode)
        logits, fc_cache = self.children['fc'].forward(pooled, mode)
        return logits, (len(features), enc_cache, pool_cache, fc_cache)

    def backward(self, cache, grad):
        num_features, enc_cache, pool_cache, fc_cache = cache
        grads = OrderedDict()
        g, fc_grads = self.children['fc'].backward(fc_cache, grad)
        self.merge_grads(grads, 'fc', fc_grads)
        g, _ = self.children['pool'].backward(pool_cache, g)
        feature_grads: List[Optional[np.ndarray]] = [None] * num_features
        feature_grads[-1] = g
        g, enc_grads = self.children['encoder'].backward(enc_cache, feature_grads)
        self.merge_grads(grads, 'encoder', enc_grads)
        return g, grads


class SLNetModel:
    """An architecture plus its live parameter and buffer arrays."""

    def __init__(self, arch: ArchSpec, net: Block):
        self.arch = arch
        self.net = net
        self.params: Dict[str, np.ndarray] = OrderedDict(net.named_parameters())
        self.buffers: Dict[str, np.ndarray] = OrderedDict(net.named_buffers())

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def check_input(self, x: np.ndarray) -> None:
        a = self.arch
        if x.ndim != 5 or x.shape[1] != a.in_channels or x.shape[3:] != (a.grid_size, a.grid_size):
            raise ShapeError(f"{a.name} expects (N, {a.in_channels}, T, {a.grid_size}, {a.grid_size}), got {x.shape}")

    def forward(self, x: np.ndarray, mode: str = 'train'):
        self.check_input(x)
        return self.net.forward(x.astype(self.dtype, copy=False), mode)

    def backward(self, cache, grad: np.ndarray):
        return self.net.backward(cache, grad)

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Parameters and buffers, buffers prefixed with ``buffer:``."""
        arrays = OrderedDict(self.params)
        for name, value in self.buffers.items():
            arrays[f"buffer:{name}"] = value
        return arrays

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        expected = self.state_arrays()
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        if missing or extra:
            raise ShapeError(f"state does not match {self.arch.name}: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, target in expected.items():
            value = arrays[name]
            if value.shape != target.shape:
                raise ShapeError(f"{name}: expected shape {target.shape}, got {value.shape}")
            target[...] = value

    def copy(self) -> 'SLNetModel':
        clone = build(self.arch, dtype=self.dtype)
        clone.load_state_arrays(self.state_arrays())
        return clone


def build(arch: ArchSpec, seed: int = 0, dtype=np.float32) -> SLNetModel:
    """Instantiates an architecture with seeded He initialisation."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    net = DetectorNet(arch, rng, dtype) if arch.is_detector else ClassifierNet(arch, rng, dtype)
    model = SLNetModel(arch, net)
    logger.debug(f"[MODEL] Built {arch.name}: {model.param_count()} parameters")
    return model
