"""Minimal layer engine with hand-written backward passes.

Feature maps are channels-last (N, H, W, C); H is the frequency axis and W
the time axis of the spectrogram. Each layer caches what its backward pass
needs during ``forward`` and writes parameter gradients into a
:class:`GradientTape` during ``backward``.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(eq=False)
class Param:
    value: np.ndarray
    trainable: bool = True
    group: str = "backbone"
    name: str = ""

    @property
    def size(self) -> int:
        return int(self.value.size)


class ParameterStore:
    """Ordered name -> Param registry for a model."""

    def __init__(self):
        self._params: OrderedDict[str, Param] = OrderedDict()

    def add(self, name: str, param: Param) -> Param:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        param.name = name
        self._params[name] = param
        return param

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def trainable(self) -> list[Param]:
        return [p for p in self._params.values() if p.trainable]

    def count(self) -> int:
        return sum(p.size for p in self.trainable())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self._params.items()}


class GradientTape(dict):
    """name -> gradient array; repeated writes to one name accumulate."""

    def add(self, param: Param, grad: np.ndarray) -> None:
        if grad.shape != param.value.shape:
            raise ValueError(f"gradient shape {grad.shape} != parameter {param.name} {param.value.shape}")
        if param.name in self:
            self[param.name] = self[param.name] + grad
        else:
            self[param.name] = grad

    def scale(self, factor: float) -> None:
        for k in self:
            self[k] = self[k] * factor

    def global_norm(self) -> float:
        return float(math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in self.values())))


class Layer:
    _cache = None

    def params(self) -> list[tuple[str, Param]]:
        return []

    def _take_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called without a recorded forward pass")
        cache, self._cache = self._cache, None
        return cache


def _he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


def same_pads(size: int, kernel: int, stride: int) -> tuple[int, int]:
    """TF-style 'same' padding: output = ceil(size / stride)."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


class Conv2d(Layer):
    """Dense 2-D convolution (used by the stem), im2col + matmul, no bias."""

    def __init__(self, cin: int, cout: int, kernel: tuple[int, int], stride: int, rng, dtype=np.float32):
        kh, kw = kernel
        self.kernel, self.stride, self.cin, self.cout = (kh, kw), stride, cin, cout
        self.weight = Param(_he_normal(rng, (kh, kw, cin, cout), kh * kw * cin, dtype))
        self.propagate = True

    def params(self):
        return [("weight", self.weight)]

    def out_shape(self, h: int, w: int) -> tuple[int, int]:
        return -(-h // self.stride), -(-w // self.stride)

    def forward(self, x, training=False):
        n, h, w, c = x.shape
        kh, kw = self.kernel
        s = self.stride
        ph, pw = same_pads(h, kh, s), same_pads(w, kw, s)
        xp = np.pad(x, ((0, 0), ph, pw, (0, 0)))
        ho, wo = self.out_shape(h, w)
        cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i, j, :] = xp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :]
        cols = cols.reshape(n * ho * wo, kh * kw * c)
        y = cols @ self.weight.value.reshape(kh * kw * c, self.cout)
        self._cache = (cols, x.shape, xp.shape, ph, pw)
        return y.reshape(n, ho, wo, self.cout)

    def backward(self, dy, tape):
        cols, xshape, xpshape, ph, pw = self._take_cache()
        n, ho, wo, cout = dy.shape
        kh, kw = self.kernel
        s = self.stride
        c = self.cin
        d2 = dy.reshape(-1, cout)
        tape.add(self.weight, (cols.T @ d2).reshape(self.weight.value.shape))
        if not self.propagate:
            return None
        dcols = (d2 @ self.weight.value.reshape(-1, cout).T).reshape(n, ho, wo, kh, kw, c)
        dxp = np.zeros(xpshape, dtype=dy.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += dcols[:, :, :, i, j, :]
        h, w = xshape[1], xshape[2]
        return dxp[:, ph[0]:ph[0] + h, pw[0]:pw[0] + w, :]


class DepthwiseConv2d(Layer):
    """Per-channel convolution with an odd (kh, kw) kernel, symmetric padding."""

    def __init__(self, channels: int, kernel: tuple[int, int], stride: int, rng, dtype=np.float32):
        kh, kw = kernel
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("depthwise kernels must have odd sizes")
        self.kernel, self.stride, self.channels = (kh, kw), stride, channels
        self.weight = Param(_he_normal(rng, (kh, kw, channels), kh * kw, dtype))

    def params(self):
        return [("weight", self.weight)]

    def out_shape(self, h, w):
        return -(-h // self.stride), -(-w // self.stride)

    def forward(self, x, training=False):
        kh, kw = self.kernel
        s = self.stride
        n, h, w, c = x.shape
        xp = np.pad(x, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2), (0, 0)))
        ho, wo = self.out_shape(h, w)
        wt = self.weight.value
        y = np.zeros((n, ho, wo, c), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                y += xp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] * wt[i, j]
        self._cache = (xp, x.shape)
        return y

    def backward(self, dy, tape):
        xp, xshape = self._take_cache()
        kh, kw = self.kernel
        s = self.stride
        _, ho, wo, c = dy.shape
        wt = self.weight.value
        dw = np.empty_like(wt)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(i, i + s * (ho - 1) + 1, s), slice(j, j + s * (wo - 1) + 1, s))
                dw[i, j] = np.einsum("nhwc,nhwc->c", dy, xp[sl])
                dxp[sl] += dy * wt[i, j]
        tape.add(self.weight, dw)
        h, w = xshape[1], xshape[2]
        return dxp[:, kh // 2:kh // 2 + h, kw // 2:kw // 2 + w, :]


class PointwiseConv2d(Layer):
    """1x1 convolution (optionally strided), no bias."""

    def __init__(self, cin: int, cout: int, stride: int, rng, dtype=np.float32):
        self.cin, self.cout, self.stride = cin, cout, stride
        self.weight = Param(_he_normal(rng, (cin, cout), cin, dtype))

    def params(self):
        return [("weight", self.weight)]

    def out_shape(self, h, w):
        return -(-h // self.stride), -(-w // self.stride)

    def forward(self, x, training=False):
        s = self.stride
        xs = x[:, ::s, ::s, :] if s > 1 else x
        self._cache = (xs, x.shape)
        return xs @ self.weight.value

    def backward(self, dy, tape):
        xs, xshape = self._take_cache()
        tape.add(self.weight, xs.reshape(-1, self.cin).T @ dy.reshape(-1, self.cout))
        dxs = dy @ self.weight.value.T
        if self.stride == 1:
            return dxs
        dx = np.zeros(xshape, dtype=dy.dtype)
        dx[:, ::self.stride, ::self.stride, :] = dxs
        return dx


class Linear(Layer):
    def __init__(self, din: int, dout: int, rng, dtype=np.float32, bias: bool = True):
        self.din, self.dout = din, dout
        self.weight = Param(_he_normal(rng, (din, dout), din, dtype))
        self.bias = Param(np.zeros(dout, dtype=dtype)) if bias else None

    def params(self):
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out

    def forward(self, x, training=False):
        if x.ndim != 2 or x.shape[1] != self.din:
            raise ValueError(f"Linear expects (N, {self.din}), got {x.shape}")
        self._cache = x
        y = x @ self.weight.value
        if self.bias is not None:
            y = y + self.bias.value
        return y

    def backward(self, dy, tape):
        x = self._take_cache()
        tape.add(self.weight, x.T @ dy)
        if self.bias is not None:
            tape.add(self.bias, dy.sum(axis=0))
        return dy @ self.weight.value.T


class BatchNorm(Layer):
    """Normalizes over every axis but the last (channels)."""

    def __init__(self, channels: int, dtype=np.float32):
        self.channels = channels
        self.gamma = Param(np.ones(channels, dtype=dtype))
        self.beta = Param(np.zeros(channels, dtype=dtype))
        self.running_mean = Param(np.zeros(channels, dtype=dtype), trainable=False)
        self.running_var = Param(np.ones(channels, dtype=dtype), trainable=False)

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta),
                ("running_mean", self.running_mean), ("running_var", self.running_var)]

    def forward(self, x, training=False):
        if x.shape[-1] != self.channels:
            raise ValueError(f"BatchNorm expects {self.channels} channels, got {x.shape}")
        axes = tuple(range(x.ndim - 1))
        if training:
            m = x.size // self.channels
            mean = x.mean(axis=axes)
            xc = x - mean
            var = np.mean(xc * xc, axis=axes)
            unbiased = var * (m / max(m - 1, 1))
            rm, rv = self.running_mean, self.running_var
            rm.value = ((1 - BN_MOMENTUM) * rm.value + BN_MOMENTUM * mean).astype(rm.value.dtype)
            rv.value = ((1 - BN_MOMENTUM) * rv.value + BN_MOMENTUM * unbiased).astype(rv.value.dtype)
        else:
            xc = x - self.running_mean.value
            var = self.running_var.value
        inv = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype)
        xhat = xc * inv
        self._cache = (xhat, inv, training)
        return xhat * self.gamma.value + self.beta.value

    def backward(self, dy, tape):
        xhat, inv, training = self._take_cache()
        axes = tuple(range(dy.ndim - 1))
        tape.add(self.gamma, np.sum(dy * xhat, axis=axes))
        tape.add(self.beta, np.sum(dy, axis=axes))
        dxhat = dy * self.gamma.value
        if not training:
            return dxhat * inv
        mean_d = dxhat.mean(axis=axes)
        mean_dx = np.mean(dxhat * xhat, axis=axes)
        return (dxhat - mean_d - xhat * mean_dx) * inv


class GELU(Layer):
    """tanh approximation."""

    def forward(self, x, training=False):
        t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
        self._cache = (x, t)
        return 0.5 * x * (1.0 + t)

    def backward(self, dy, tape):
        x, t = self._take_cache()
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * (x * x * x))))


class GlobalMaxPool(Layer):
    """(N, H, W, C) -> (N, C); the gradient goes to the first argmax."""

    def forward(self, x, training=False):
        n, h, w, c = x.shape
        flat = x.reshape(n, h * w, c)
        idx = flat.argmax(axis=1)
        self._cache = (idx, x.shape)
        return np.take_along_axis(flat, idx[:, None, :], axis=1)[:, 0, :]

    def backward(self, dy, tape):
        idx, xshape = self._take_cache()
        n, h, w, c = xshape
        dx = np.zeros((n, h * w, c), dtype=dy.dtype)
        np.put_along_axis(dx, idx[:, None, :], dy[:, None, :], axis=1)
        return dx.reshape(xshape)


class Sequential(Layer):
    def __init__(self, *named_layers: tuple[str, Layer]):
        self.layers = list(named_layers)

    def params(self):
        return [(f"{name}.{pn}", p) for name, layer in self.layers for pn, p in layer.params()]

    def forward(self, x, training=False):
        for _, layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, dy, tape):
        for _, layer in reversed(self.layers):
            dy = layer.backward(dy, tape)
        return dy
