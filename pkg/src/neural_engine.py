"""Dense numpy layers with explicit forward/backward for the SLNet family.

Every layer honours one contract::

    out, cache = layer.forward(x, mode)          # mode is 'train' or 'eval'
    grad_in, grads = layer.backward(cache, grad_out)

``grads`` maps parameter names (dotted for composite blocks) to arrays shaped like the
parameters. Spatiotemporal tensors use the 5-axis layout (N, C, T, W, H). Layers compute
in the dtype of their parameters, so a float64 model can be gradient-checked exactly.
"""
import os
import math
import logging
import itertools
from enum import Enum
from dataclasses import dataclass
from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericError, ShapeError

logger = logging.getLogger(__name__)

MODES = ('train', 'eval')
BN_MOMENTUM = 0.1
BN_EPS = 1e-5

_debug_finite = os.environ.get('SLNET_DEBUG_FINITE', '') not in ('', '0')


def set_debug_checks(enabled: bool) -> None:
    """Turns on the finiteness check after every composite forward/backward."""
    global _debug_finite
    _debug_finite = bool(enabled)


def _check_finite(arr: np.ndarray, where: str) -> None:
    if _debug_finite and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values after {where}")


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")


def _triple(value) -> Tuple[int, int, int]:
    if isinstance(value, int):
        return (value, value, value)
    value = tuple(int(v) for v in value)
    if len(value) != 3:
        raise ConfigError(f"expected 3 values (T, W, H), got {value}")
    return value


class LayerKind(Enum):
    CONV2D_SPATIAL = 'conv2d_spatial'
    CONV1D_TEMPORAL = 'conv1d_temporal'
    CONV21D_BLOCK = 'conv21d_block'
    TRANSPOSED_CONV3D = 'transposed_conv3d'
    UPSAMPLE_NEAREST = 'upsample_nearest'
    CONV3D_1X1 = 'conv3d_1x1'
    BATCH_NORM = 'batch_norm'
    RELU = 'relu'
    SIGMOID = 'sigmoid'
    GLOBAL_AVG_POOL = 'global_avg_pool'
    LINEAR = 'linear'
    ADD = 'add'


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_channels: int = 0
    out_channels: int = 0
    kernel: Tuple[int, int, int] = (1, 1, 1)
    stride: Tuple[int, int, int] = (1, 1, 1)
    padding: Tuple[int, int, int] = (0, 0, 0)
    factor: Tuple[int, int, int] = (1, 1, 1)
    bias: bool = True
    batch_norm: bool = True

    def __post_init__(self):
        for name in ('kernel', 'stride', 'padding', 'factor'):
            object.__setattr__(self, name, _triple(getattr(self, name)))
        if any(s < 1 for s in self.stride) or any(f < 1 for f in self.factor) or any(k < 1 for k in self.kernel):
            raise ConfigError(f"{self.kind.value}: kernel, stride and factor entries must be >= 1")
        if any(p < 0 for p in self.padding):
            raise ConfigError(f"{self.kind.value}: padding must be >= 0")
        if self.kind in (LayerKind.CONV2D_SPATIAL, LayerKind.CONV1D_TEMPORAL, LayerKind.CONV21D_BLOCK):
            if any(k % 2 == 0 for k in self.kernel):
                raise ConfigError(f"{self.kind.value}: same padding needs odd kernels, got {self.kernel}")
        if self.kind is LayerKind.CONV2D_SPATIAL and self.kernel[0] != 1:
            raise ConfigError("spatial convolution must have temporal kernel 1")
        if self.kind is LayerKind.CONV1D_TEMPORAL and self.kernel[1:] != (1, 1):
            raise ConfigError("temporal convolution must have spatial kernel 1x1")
        if self.kind is LayerKind.CONV3D_1X1 and self.kernel != (1, 1, 1):
            raise ConfigError("pointwise convolution must have kernel 1x1x1")
        if self.kind in (LayerKind.CONV2D_SPATIAL, LayerKind.CONV1D_TEMPORAL, LayerKind.CONV21D_BLOCK,
                         LayerKind.TRANSPOSED_CONV3D, LayerKind.CONV3D_1X1, LayerKind.LINEAR):
            if self.in_channels < 1 or self.out_channels < 1:
                raise ConfigError(f"{self.kind.value}: channel counts must be >= 1")
        if self.kind is LayerKind.BATCH_NORM and self.in_channels < 1:
            raise ConfigError("batch_norm: channel count must be >= 1")

    def param_count(self) -> int:
        """Parameters owned directly by a primitive layer of this spec."""
        k = self.kernel[0] * self.kernel[1] * self.kernel[2]
        if self.kind in (LayerKind.CONV2D_SPATIAL, LayerKind.CONV1D_TEMPORAL, LayerKind.CONV3D_1X1,
                         LayerKind.TRANSPOSED_CONV3D):
            return self.in_channels * self.out_channels * k + (self.out_channels if self.bias else 0)
        if self.kind is LayerKind.LINEAR:
            return self.in_channels * self.out_channels + (self.out_channels if self.bias else 0)
        if self.kind is LayerKind.BATCH_NORM:
            return 2 * self.in_channels
        return 0


def same_padding(kernel) -> Tuple[int, int, int]:
    return tuple(k // 2 for k in _triple(kernel))


def mid_channels_for(in_channels: int, out_channels: int, kernel) -> int:
    """Intermediate width that keeps a (2+1)D block near the parameter count of a full 3D conv."""
    kt, kw, kh = _triple(kernel)
    mid = (kt * kw * kh * in_channels * out_channels) / (kw * kh * in_channels + kt * out_channels)
    return max(1, int(mid))


# ---------------------------------------------------------------------------
# Base classes

class Layer:
    """A primitive layer owning parameters (and possibly running buffers)."""

    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self.params: Dict[str, np.ndarray] = OrderedDict()
        self.buffers: Dict[str, np.ndarray] = OrderedDict()

    def forward(self, x: np.ndarray, mode: str = 'train'):
        raise NotImplementedError

    def backward(self, cache, grad: np.ndarray):
        raise NotImplementedError

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in self.params.items():
            yield prefix + name, value

    def named_buffers(self, prefix: str = '') -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in self.buffers.items():
            yield prefix + name, value

    def primitive_specs(self) -> List[LayerSpec]:
        return [self.spec]

    def __repr__(self):
        return f"{self.__class__.__name__}({self.spec.in_channels}->{self.spec.out_channels})"


class Block(Layer):
    """A composite of named child layers; parameter names are dotted paths."""

    def __init__(self, spec: Optional[LayerSpec] = None):
        super().__init__(spec)
        self.children: Dict[str, Layer] = OrderedDict()

    def __repr__(self):
        return f"{self.__class__.__name__}({', '.join(self.children)})"

    def add(self, name: str, layer: Layer) -> Layer:
        self.children[name] = layer
        return layer

    def named_parameters(self, prefix: str = ''):
        for name, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = ''):
        for name, child in self.children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def primitive_specs(self) -> List[LayerSpec]:
        specs = []
        for child in self.children.values():
            specs.extend(child.primitive_specs())
        return specs

    @staticmethod
    def merge_grads(into: Dict[str, np.ndarray], name: str, grads: Dict[str, np.ndarray]) -> None:
        for key, value in grads.items():
            into[f"{name}.{key}"] = value


class Sequential(Block):
    def forward(self, x, mode='train'):
        _check_mode(mode)
        caches = []
        for name, child in self.children.items():
            x, cache = child.forward(x, mode)
            _check_finite(x, f"forward of {name}")
            caches.append(cache)
        return x, caches

    def backward(self, caches, grad):
        grads: Dict[str, np.ndarray] = OrderedDict()
        for (name, child), cache in zip(reversed(list(self.children.items())), reversed(caches)):
            grad, child_grads = child.backward(cache, grad)
            _check_finite(grad, f"backward of {name}")
            self.merge_grads(grads, name, child_grads)
        return grad, grads


# ---------------------------------------------------------------------------
# Convolutions

def _he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray], stride, padding) -> Tuple[np.ndarray, tuple]:
    """Cross-correlation of (N, C, T, W, H) with weights (O, C, kt, kw, kh)."""
    if x.ndim != 5 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv3d expects (N, {w.shape[1]}, T, W, H), got {x.shape}")
    pt, pw, ph = padding
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pt), (pw, pw), (ph, ph)))
    kernel = w.shape[2:]
    if any(xp.shape[2 + i] < kernel[i] for i in range(3)):
        raise ShapeError(f"conv3d input {x.shape} smaller than kernel {kernel} after padding {padding}")
    st, sw, sh = stride
    windows = sliding_window_view(xp, kernel, axis=(2, 3, 4))[:, :, ::st, ::sw, ::sh]
    out = np.tensordot(windows, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out = np.ascontiguousarray(np.moveaxis(out, -1, 1))
    if b is not None:
        out += b[None, :, None, None, None]
    return out, (windows, xp.shape)


def conv3d_backward(grad: np.ndarray, w: np.ndarray, windows: np.ndarray, padded_shape, stride, padding,
                    has_bias: bool):
    st, sw, sh = stride
    _, _, to, wo, ho = grad.shape
    grad_w = np.tensordot(grad, windows, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    grad_b = grad.sum(axis=(0, 2, 3, 4)) if has_bias else None
    grad_xp = np.zeros(padded_shape, dtype=grad.dtype)
    kt, kw, kh = w.shape[2:]
    for dt, dw, dh in itertools.product(range(kt), range(kw), range(kh)):
        contribution = np.tensordot(grad, w[:, :, dt, dw, dh], axes=([1], [0]))
        grad_xp[:, :, dt:dt + st * (to - 1) + 1:st, dw:dw + sw * (wo - 1) + 1:sw,
                dh:dh + sh * (ho - 1) + 1:sh] += np.moveaxis(contribution, -1, 1)
    pt, pw, ph = padding
    t_end, w_end, h_end = padded_shape[2] - pt, padded_shape[3] - pw, padded_shape[4] - ph
    return grad_xp[:, :, pt:t_end, pw:w_end, ph:h_end], grad_w, grad_b


class Conv3d(Layer):
    """Shared implementation behind the spatial, temporal and pointwise convolutions."""

    def __init__(self, spec: LayerSpec, rng: np.random.Generator, dtype=np.float32):
        super().__init__(spec)
        shape = (spec.out_channels, spec.in_channels) + spec.kernel
        fan_in = spec.in_channels * spec.kernel[0] * spec.kernel[1] * spec.kernel[2]
        self.params['weight'] = _he_normal(rng, shape, fan_in, dtype)
        if spec.bias:
            self.params['bias'] = np.zeros(spec.out_channels, dtype=dtype)

    def forward(self, x, mode='train'):
        _check_mode(mode)
        out, (windows, padded_shape) = conv3d_forward(x, self.params['weight'], self.params.get('bias'),
                                                      self.spec.stride, self.spec.padding)
        return out, (windows, padded_shape)

    def backward(self, cache, grad):
        windows, padded_shape = cache
        grad_x, grad_w, grad_b = conv3d_backward(grad, self.params['weight'], windows, padded_shape,
                                                 self.spec.stride, self.spec.padding, self.spec.bias)
        grads = OrderedDict(weight=grad_w)
        if grad_b is not None:
            grads['bias'] = grad_b
        return grad_x, grads


def conv2d_spatial(in_channels: int, out_channels: int, rng, kernel: int = 3, stride: int = 1,
                   bias: bool = True, dtype=np.float32) -> Conv3d:
    spec = LayerSpec(LayerKind.CONV2D_SPATIAL, in_channels, out_channels, kernel=(1, kernel, kernel),
                     stride=(1, stride, stride), padding=(0, kernel // 2, kernel // 2), bias=bias)
    return Conv3d(spec, rng, dtype)


def conv1d_temporal(in_channels: int, out_channels: int, rng, kernel: int = 3, stride: int = 1,
                    bias: bool = True, dtype=np.float32) -> Conv3d:
    spec = LayerSpec(LayerKind.CONV1D_TEMPORAL, in_channels, out_channels, kernel=(kernel, 1, 1),
                     stride=(stride, 1, 1), padding=(kernel // 2, 0, 0), bias=bias)
    return Conv3d(spec, rng, dtype)


def conv3d_1x1(in_channels: int, out_channels: int, rng, stride=(1, 1, 1), bias: bool = True,
               dtype=np.float32) -> Conv3d:
    spec = LayerSpec(LayerKind.CONV3D_1X1, in_channels, out_channels, stride=stride, bias=bias)
    return Conv3d(spec, rng, dtype)


class TransposedConv3d(Layer):
    """Fractionally strided convolution; weights are (C_in, C_out, kt, kw, kh).

    Output length per axis is ``(n - 1) * stride - 2 * padding + kernel``.
    """

    def __init__(self, spec: LayerSpec, rng: np.random.Generator, dtype=np.float32):
        super().__init__(spec)
        shape = (spec.in_channels, spec.out_channels) + spec.kernel
        fan_in = spec.in_channels * spec.kernel[0] * spec.kernel[1] * spec.kernel[2]
        self.params['weight'] = _he_normal(rng, shape, fan_in, dtype)
        if spec.bias:
            self.params['bias'] = np.zeros(spec.out_channels, dtype=dtype)

    def _full_shape(self, x_shape):
        n, _, t, w, h = x_shape
        return (n, self.spec.out_channels) + tuple(
            (size - 1) * s + k for size, s, k in zip((t, w, h), self.spec.stride, self.spec.kernel))

    def _crop(self, full_shape):
        return tuple(slice(p, full - p) for p, full in zip(self.spec.padding, full_shape[2:]))

    def forward(self, x, mode='train'):
        _check_mode(mode)
        if x.ndim != 5 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"transposed conv expects (N, {self.spec.in_channels}, T, W, H), got {x.shape}")
        w = self.params['weight']
        st, sw, sh = self.spec.stride
        _, _, t, wi, hi = x.shape
        full = np.zeros(self._full_shape(x.shape), dtype=w.dtype)
        kt, kw, kh = self.spec.kernel
        for dt, dw, dh in itertools.product(range(kt), range(kw), range(kh)):
            contribution = np.tensordot(x, w[:, :, dt, dw, dh], axes=([1], [0]))
            full[:, :, dt:dt + st * (t - 1) + 1:st, dw:dw + sw * (wi - 1) + 1:sw,
                 dh:dh + sh * (hi - 1) + 1:sh] += np.moveaxis(contribution, -1, 1)
        crop = self._crop(full.shape)
        out = np.ascontiguousarray(full[(slice(None), slice(None)) + crop])
        if any(size <= 0 for size in out.shape[2:]):
            raise ShapeError(f"transposed conv output would be empty for input {x.shape}")
        if 'bias' in self.params:
            out += self.params['bias'][None, :, None, None, None]
        return out, (x, full.shape)

    def backward(self, cache, grad):
        x, full_shape = cache
        w = self.params['weight']
        st, sw, sh = self.spec.stride
        _, _, t, wi, hi = x.shape
        grad_full = np.zeros(full_shape, dtype=grad.dtype)
        grad_full[(slice(None), slice(None)) + self._crop(full_shape)] = grad
        grad_x = np.zeros_like(x)
        grad_w = np.zeros_like(w)
        kt, kw, kh = self.spec.kernel
        for dt, dw, dh in itertools.product(range(kt), range(kw), range(kh)):
            g = grad_full[:, :, dt:dt + st * (t - 1) + 1:st, dw:dw + sw * (wi - 1) + 1:sw,
                          dh:dh + sh * (hi - 1) + 1:sh]
            grad_x += np.moveaxis(np.tensordot(g, w[:, :, dt, dw, dh], axes=([1], [1])), -1, 1)
            grad_w[:, :, dt, dw, dh] = np.tensordot(x, g, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        grads = OrderedDict(weight=grad_w)
        if 'bias' in self.params:
            grads['bias'] = grad.sum(axis=(0, 2, 3, 4))
        return grad_x, grads


def transposed_conv3d(in_channels: int, out_channels: int, rng, temporal_up: bool = False,
                      spatial_up: bool = True, bias: bool = True, dtype=np.float32) -> TransposedConv3d:
    """Kernel 4 / stride 2 / padding 1 doubles an axis; kernel 3 / stride 1 / padding 1 keeps it."""
    def axis(up):
        return (4, 2, 1) if up else (3, 1, 1)
    (kt, st, pt), (ks, ss, ps) = axis(temporal_up), axis(spatial_up)
    spec = LayerSpec(LayerKind.TRANSPOSED_CONV3D, in_channels, out_channels, kernel=(kt, ks, ks),
                     stride=(st, ss, ss), padding=(pt, ps, ps), bias=bias)
    return TransposedConv3d(spec, rng, dtype)


class UpsampleNearest(Layer):
    def __init__(self, factor=(1, 2, 2)):
        super().__init__(LayerSpec(LayerKind.UPSAMPLE_NEAREST, factor=factor))

    def forward(self, x, mode='train'):
        _check_mode(mode)
        if x.ndim != 5:
            raise ShapeError(f"upsample expects (N, C, T, W, H), got {x.shape}")
        out = x
        for axis, f in zip((2, 3, 4), self.spec.factor):
            if f > 1:
                out = np.repeat(out, f, axis=axis)
        return out, x.shape

    def backward(self, cache, grad):
        n, c, t, w, h = cache
        ft, fw, fh = self.spec.factor
        grad_x = grad.reshape(n, c, t, ft, w, fw, h, fh).sum(axis=(3, 5, 7))
        return grad_x, OrderedDict()


# ---------------------------------------------------------------------------
# Normalisation, activations, heads

class BatchNorm(Layer):
    """Per-channel normalisation over every axis but the channel axis (axis 1)."""

    def __init__(self, channels: int, dtype=np.float32):
        super().__init__(LayerSpec(LayerKind.BATCH_NORM, channels, channels))
        self.params['gamma'] = np.ones(channels, dtype=dtype)
        self.params['beta'] = np.zeros(channels, dtype=dtype)
        self.buffers['running_mean'] = np.zeros(channels, dtype=dtype)
        self.buffers['running_var'] = np.ones(channels, dtype=dtype)

    def _axes(self, x):
        return (0,) + tuple(range(2, x.ndim))

    def _bcast(self, v, x):
        return v.reshape((1, -1) + (1,) * (x.ndim - 2))

    def forward(self, x, mode='train'):
        _check_mode(mode)
        if x.ndim < 2 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"batch_norm expects {self.spec.in_channels} channels on axis 1, got {x.shape}")
        axes = self._axes(x)
        if mode == 'train':
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            count = x.size // x.shape[1]
            unbiased = var * count / max(count - 1, 1)
            rm, rv = self.buffers['running_mean'], self.buffers['running_var']
            rm[...] = (1 - BN_MOMENTUM) * rm + BN_MOMENTUM * mean
            rv[...] = (1 - BN_MOMENTUM) * rv + BN_MOMENTUM * unbiased
        else:
            mean, var = self.buffers['running_mean'], self.buffers['running_var']
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        x_hat = (x - self._bcast(mean, x)) * self._bcast(inv_std, x)
        out = self._bcast(self.params['gamma'], x) * x_hat + self._bcast(self.params['beta'], x)
        return out.astype(x.dtype, copy=False), (x_hat, inv_std, mode)

    def backward(self, cache, grad):
        x_hat, inv_std, mode = cache
        axes = self._axes(grad)
        gamma = self._bcast(self.params['gamma'], grad)
        grads = OrderedDict(gamma=(grad * x_hat).sum(axis=axes), beta=grad.sum(axis=axes))
        dx_hat = grad * gamma
        if mode == 'eval':
            return dx_hat * self._bcast(inv_std, grad), grads
        m = grad.size // grad.shape[1]
        sum_dx_hat = self._bcast(dx_hat.sum(axis=axes), grad)
        sum_dx_hat_xhat = self._bcast((dx_hat * x_hat).sum(axis=axes), grad)
        grad_x = self._bcast(inv_std, grad) / m * (m * dx_hat - sum_dx_hat - x_hat * sum_dx_hat_xhat)
        return grad_x, grads


class ReLU(Layer):
    def __init__(self):
        super().__init__(LayerSpec(LayerKind.RELU))

    def forward(self, x, mode='train'):
        _check_mode(mode)
        mask = x > 0
        return x * mask, mask

    def backward(self, cache, grad):
        return grad * cache, OrderedDict()


class Sigmoid(Layer):
    def __init__(self):
        super().__init__(LayerSpec(LayerKind.SIGMOID))

    def forward(self, x, mode='train'):
        _check_mode(mode)
        # split by sign so exp never overflows
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out, out

    def backward(self, cache, grad):
        return grad * cache * (1.0 - cache), OrderedDict()


class GlobalAvgPool(Layer):
    """(N, C, T, W, H) -> (N, C)."""

    def __init__(self):
        super().__init__(LayerSpec(LayerKind.GLOBAL_AVG_POOL))

    def forward(self, x, mode='train'):
        _check_mode(mode)
        if x.ndim != 5:
            raise ShapeError(f"global pooling expects (N, C, T, W, H), got {x.shape}")
        return x.mean(axis=(2, 3, 4)), x.shape

    def backward(self, cache, grad):
        n, c, t, w, h = cache
        return np.broadcast_to(grad[:, :, None, None, None] / (t * w * h), cache).copy(), OrderedDict()


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__(LayerSpec(LayerKind.LINEAR, in_features, out_features))
        self.params['weight'] = _he_normal(rng, (out_features, in_features), in_features, dtype)
        self.params['bias'] = np.zeros(out_features, dtype=dtype)

    def forward(self, x, mode='train'):
        _check_mode(mode)
        if x.ndim != 2 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"linear expects (N, {self.spec.in_channels}), got {x.shape}")
        return x @ self.params['weight'].T + self.params['bias'], x

    def backward(self, cache, grad):
        x = cache
        grads = OrderedDict(weight=grad.T @ x, bias=grad.sum(axis=0))
        return grad @ self.params['weight'], grads


class Add(Layer):
    """Residual join: forward takes a pair, backward hands the gradient to both branches."""

    def __init__(self):
        super().__init__(LayerSpec(LayerKind.ADD))

    def forward(self, inputs, mode='train'):
        _check_mode(mode)
        a, b = inputs
        if a.shape != b.shape:
            raise ShapeError(f"residual add of mismatched shapes {a.shape} and {b.shape}")
        return a + b, None

    def backward(self, cache, grad):
        return (grad, grad), OrderedDict()


# ---------------------------------------------------------------------------
# (2+1)D block

class Conv21dBlock(Block):
    """Spatial k x k convolution per frame, [BatchNorm], ReLU, then temporal convolution per site."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, kernel=3,
                 stride=(1, 1, 1), batch_norm: bool = True, mid_channels: Optional[int] = None,
                 dtype=np.float32):
        kt, kw, kh = _triple(kernel)
        st, sw, sh = _triple(stride)
        spec = LayerSpec(LayerKind.CONV21D_BLOCK, in_channels, out_channels, kernel=(kt, kw, kh),
                         stride=(st, sw, sh), padding=(kt // 2, kw // 2, kh // 2), batch_norm=batch_norm)
        super().__init__(spec)
        mid = mid_channels or mid_channels_for(in_channels, out_channels, (kt, kw, kh))
        self.add('spatial', Conv3d(LayerSpec(LayerKind.CONV2D_SPATIAL, in_channels, mid, kernel=(1, kw, kh),
                                             stride=(1, sw, sh), padding=(0, kw // 2, kh // 2),
                                             bias=not batch_norm), rng, dtype))
        if batch_norm:
            self.add('bn', BatchNorm(mid, dtype))
        self.add('relu', ReLU())
        self.add('temporal', Conv3d(LayerSpec(LayerKind.CONV1D_TEMPORAL, mid, out_channels, kernel=(kt, 1, 1),
                                              stride=(st, 1, 1), padding=(kt // 2, 0, 0)), rng, dtype))

    forward = Sequential.forward
    backward = Sequential.backward


# ---------------------------------------------------------------------------
# Losses

def mse_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean squared error over every element, and its gradient 2 (pred - target) / N."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss of mismatched shapes {pred.shape} and {target.shape}")
    diff = pred - target.astype(pred.dtype, copy=False)
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    return loss, (2.0 / diff.size) * diff


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy of (N, K) logits against integer labels, with gradient."""
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross entropy expects (N, K) logits and (N,) labels, got {logits.shape}, {labels.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = float(-np.mean(np.log(probs[np.arange(n), labels].astype(np.float64) + 1e-12)))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n
