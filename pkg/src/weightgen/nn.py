"""Minimal neural-network layers with hand-written backward passes.

Only what the experiments need: conv (dense or generated), batch norm,
ReLU, adaptive average pooling, flatten, linear, and an optional
activation fake-quantizer.  Layers cache what their backward needs on
forward; ``Sequential`` chains them and collects parameters.

Architectures are described by compact strings such as

    C32K5S2-C32K5S1-C32K5S1-AvgPool3-FC10

where C{o}K{k}S{s}[P{p}] expands to conv -> batch norm -> ReLU,
AvgPool{n} adaptively pools to n x n, and FC{o} is a final linear layer.
"""

from __future__ import annotations

import re

import numpy as np

from . import generator, tensor
from .errors import ConfigError, ShapeError
from .quantize import fake_quantize, quantize_codes, ste_grad


class Param:
    """A trainable array plus its accumulated gradient."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


class Layer:
    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> list[Param]:
        return []


class Conv2d(Layer):
    """Dense convolution, no bias (batch norm follows it everywhere here)."""

    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1,
                 pad: int = 0, rng: np.random.Generator | None = None):
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride, self.pad = stride, pad
        rng = rng or np.random.default_rng()
        w = rng.standard_normal((c_out, c_in, k, k)) * np.sqrt(2.0 / (c_in * k * k))
        self.weight = Param("weight", w)
        self._cache = None

    def forward(self, x, train=False):
        x = tensor.as_tensor4d(x, "conv input")
        cols = tensor.im2col(x, self.k, self.stride, self.pad)
        w_mat = self.weight.value.reshape(self.c_out, -1)
        out_mat = tensor.matmul(w_mat, cols)
        n = x.shape[0]
        h_out = tensor.conv_output_size(x.shape[2], self.k, self.stride, self.pad)
        w_out = tensor.conv_output_size(x.shape[3], self.k, self.stride, self.pad)
        self._cache = (x.shape, cols)
        return np.ascontiguousarray(
            out_mat.reshape(self.c_out, n, h_out, w_out).transpose(1, 0, 2, 3)
        )

    def backward(self, grad):
        x_shape, cols = self._cache
        g_mat = grad.transpose(1, 0, 2, 3).reshape(self.c_out, -1)
        self.weight.grad += (
            tensor.matmul(g_mat, cols.T).reshape(self.weight.value.shape)
        )
        d_cols = tensor.matmul(self.weight.value.reshape(self.c_out, -1).T, g_mat)
        return tensor.col2im(d_cols, x_shape, self.k, self.stride, self.pad)

    def params(self):
        return [self.weight]


class GeneratedConv2d(Layer):
    """Convolution whose kernel tensor is generated from two-level factors."""

    def __init__(self, factors: generator.TwoLevelFactors, stride: int = 1,
                 pad: int = 0, quantized: bool = True):
        factors.validate()
        self.factors = factors
        self.stride, self.pad = stride, pad
        self.quantized = quantized
        p = factors.plan
        self.c_in, self.c_out, self.k = p.c_in, p.c_out, p.k
        self._params = []
        for name in ("basis", "coeff", "mixer"):
            value = getattr(factors, name)
            if value is not None:
                self._params.append(Param(name, value))
        self._cache = None

    def forward(self, x, train=False):
        x = tensor.as_tensor4d(x, "conv input")
        fwd = generator.forward(self.factors, quantized=self.quantized)
        cols = tensor.im2col(x, self.k, self.stride, self.pad)
        w_mat = fwd.weight.reshape(self.c_out, -1)
        out_mat = tensor.matmul(w_mat, cols)
        n = x.shape[0]
        h_out = tensor.conv_output_size(x.shape[2], self.k, self.stride, self.pad)
        w_out = tensor.conv_output_size(x.shape[3], self.k, self.stride, self.pad)
        self._cache = (x.shape, cols, fwd)
        return np.ascontiguousarray(
            out_mat.reshape(self.c_out, n, h_out, w_out).transpose(1, 0, 2, 3)
        )

    def backward(self, grad):
        x_shape, cols, fwd = self._cache
        g_mat = grad.transpose(1, 0, 2, 3).reshape(self.c_out, -1)
        d_weight = tensor.matmul(g_mat, cols.T).reshape(fwd.weight.shape)
        fgrads = generator.backward(self.factors, fwd, d_weight)
        for p in self._params:
            g = getattr(fgrads, p.name)
            p.grad += g
        d_cols = tensor.matmul(fwd.weight.reshape(self.c_out, -1).T, g_mat)
        return tensor.col2im(d_cols, x_shape, self.k, self.stride, self.pad)

    def params(self):
        return self._params


class BatchNorm2d(Layer):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Param("gamma", np.ones(channels))
        self.beta = Param("beta", np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self._cache = None

    def forward(self, x, train=False):
        x = tensor.as_tensor4d(x, "batch norm input")
        if x.shape[1] != self.channels:
            raise ShapeError(
                f"batch norm over {self.channels} channels got input {x.shape}"
            )
        if train:
            mu = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = x.shape[0] * x.shape[2] * x.shape[3]
            self.running_mean = (
                (1 - self.momentum) * self.running_mean + self.momentum * mu
            )
            unbiased = var * (m / max(m - 1, 1))
            self.running_var = (
                (1 - self.momentum) * self.running_var + self.momentum * unbiased
            )
        else:
            mu, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std, train)
        return self.gamma.value[None, :, None, None] * xhat + \
            self.beta.value[None, :, None, None]

    def backward(self, grad):
        xhat, inv_std, train = self._cache
        axes = (0, 2, 3)
        self.beta.grad += grad.sum(axis=axes)
        self.gamma.grad += (grad * xhat).sum(axis=axes)
        d_xhat = grad * self.gamma.value[None, :, None, None]
        if not train:
            return d_xhat * inv_std[None, :, None, None]
        m = grad.shape[0] * grad.shape[2] * grad.shape[3]
        mean_d = d_xhat.mean(axis=axes)
        mean_dx = (d_xhat * xhat).mean(axis=axes)
        return inv_std[None, :, None, None] * (
            d_xhat - mean_d[None, :, None, None] - xhat * mean_dx[None, :, None, None]
        )

    def params(self):
        return [self.gamma, self.beta]


class ReLU(Layer):
    def forward(self, x, train=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._mask


class AdaptiveAvgPool2d(Layer):
    """Average-pool to a fixed (out, out) grid, window i spanning
    [floor(i*H/out), ceil((i+1)*H/out))."""

    def __init__(self, out: int):
        if out < 1:
            raise ConfigError(f"pool output size must be positive, got {out}")
        self.out = out

    @staticmethod
    def _windows(size: int, out: int):
        return [
            (int(np.floor(i * size / out)), int(np.ceil((i + 1) * size / out)))
            for i in range(out)
        ]

    def forward(self, x, train=False):
        x = tensor.as_tensor4d(x, "pool input")
        n, c, h, w = x.shape
        if h < self.out or w < self.out:
            raise ShapeError(f"cannot pool {h}x{w} down to {self.out}x{self.out}")
        hw = self._windows(h, self.out)
        ww = self._windows(w, self.out)
        out = np.empty((n, c, self.out, self.out))
        for i, (h0, h1) in enumerate(hw):
            for j, (w0, w1) in enumerate(ww):
                out[:, :, i, j] = x[:, :, h0:h1, w0:w1].mean(axis=(2, 3))
        self._cache = (x.shape, hw, ww)
        return out

    def backward(self, grad):
        x_shape, hw, ww = self._cache
        dx = np.zeros(x_shape)
        for i, (h0, h1) in enumerate(hw):
            for j, (w0, w1) in enumerate(ww):
                area = (h1 - h0) * (w1 - w0)
                dx[:, :, h0:h1, w0:w1] += grad[:, :, i : i + 1, j : j + 1] / area
        return dx


class Flatten(Layer):
    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Linear(Layer):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng()
        bound = 1.0 / np.sqrt(d_in)
        self.weight = Param("weight", rng.uniform(-bound, bound, (d_out, d_in)))
        self.bias = Param("bias", np.zeros(d_out))

    def forward(self, x, train=False):
        self._x = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, grad):
        self.weight.grad += grad.T @ self._x
        self.bias.grad += grad.sum(axis=0)
        return grad @ self.weight.value

    def params(self):
        return [self.weight, self.bias]


class ActQuant(Layer):
    """Fake-quantize activations with a per-batch dynamic scale."""

    def __init__(self, bits: int = 8):
        self.bits = bits

    def forward(self, x, train=False):
        _, scale = quantize_codes(x, self.bits)
        self._x, self._scale = x, scale
        return fake_quantize(x, self.bits)

    def backward(self, grad):
        return ste_grad(self._x, self._scale, grad)


class Sequential(Layer):
    def __init__(self, layers: list[Layer]):
        self.layers = layers

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def params(self):
        out = []
        for i, layer in enumerate(self.layers):
            for p in layer.params():
                out.append(p)
        return out

    def named_params(self) -> list[tuple[str, Param]]:
        out = []
        for i, layer in enumerate(self.layers):
            for p in layer.params():
                out.append((f"{i}.{p.name}", p))
        return out

    def generated_layers(self) -> list[GeneratedConv2d]:
        return [l for l in self.layers if isinstance(l, GeneratedConv2d)]

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()


_CONV_RE = re.compile(r"^C(\d+)K(\d+)S(\d+)(?:P(\d+))?$")
_POOL_RE = re.compile(r"^AvgPool(\d+)$")
_FC_RE = re.compile(r"^FC(\d+)$")


def parse_arch(arch: str) -> list[tuple]:
    """Parse an architecture string into (kind, args) tokens."""
    tokens = []
    for piece in arch.split("-"):
        m = _CONV_RE.match(piece)
        if m:
            c_out, k, stride = int(m.group(1)), int(m.group(2)), int(m.group(3))
            pad = int(m.group(4)) if m.group(4) else 0
            tokens.append(("conv", (c_out, k, stride, pad)))
            continue
        m = _POOL_RE.match(piece)
        if m:
            tokens.append(("avgpool", (int(m.group(1)),)))
            continue
        m = _FC_RE.match(piece)
        if m:
            tokens.append(("fc", (int(m.group(1)),)))
            continue
        raise ConfigError(f"unrecognized architecture token {piece!r} in {arch!r}")
    if not tokens:
        raise ConfigError("empty architecture string")
    return tokens


def build_network(
    arch: str,
    in_channels: int,
    in_size: int,
    rng: np.random.Generator,
    generated: tuple[int, ...] = (),
    n_basis: int = 1,
    n_cross: int = 1,
    q_basis: int = 4,
    q_coeff: int = 4,
    q_mixer: int = 4,
    act_bits: int | None = None,
    quantized: bool = True,
) -> Sequential:
    """Build a Sequential from an architecture string.

    generated lists the conv indices (0-based, in order of appearance) to
    replace with generated layers using the given cardinalities and widths.
    """
    layers: list[Layer] = []
    c, size = in_channels, in_size
    conv_idx = 0
    flat_dim = None
    for kind, args in parse_arch(arch):
        if kind == "conv":
            c_out, k, stride, pad = args
            out_size = tensor.conv_output_size(size, k, stride, pad)
            if out_size < 1:
                raise ConfigError(
                    f"conv C{c_out}K{k}S{stride} collapses a {size}x{size} input"
                )
            if conv_idx in generated:
                plan = generator.plan_layer(
                    c_out, c, k, n_basis, n_cross, q_basis, q_coeff, q_mixer
                )
                factors = generator.init_random(plan, rng)
                layers.append(
                    GeneratedConv2d(factors, stride=stride, pad=pad,
                                    quantized=quantized)
                )
            else:
                layers.append(Conv2d(c, c_out, k, stride=stride, pad=pad, rng=rng))
            layers.append(BatchNorm2d(c_out))
            layers.append(ReLU())
            if act_bits is not None:
                layers.append(ActQuant(act_bits))
            c, size = c_out, out_size
            conv_idx += 1
        elif kind == "avgpool":
            (out,) = args
            layers.append(AdaptiveAvgPool2d(out))
            size = out
        elif kind == "fc":
            (d_out,) = args
            if flat_dim is None:
                layers.append(Flatten())
                flat_dim = c * size * size
            layers.append(Linear(flat_dim, d_out, rng=rng))
            flat_dim = d_out
    bad = [g for g in generated if g >= conv_idx]
    if bad:
        raise ConfigError(
            f"generated conv indices {bad} out of range: arch has {conv_idx} convs"
        )
    return Sequential(layers)
