"""Differentiable 1-D layers: convolutions, activations, pooling, normalization, linear."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .spectral import SpectralWeight
from .errors import ContractError, DimensionError
from .tensor import Tensor, _node


def conv_output_length(length: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, [(0, 0)] * (x.ndim - 1) + [(padding, padding)])


def _windows(xp: np.ndarray, kernel: int, stride: int, out_len: int) -> np.ndarray:
    # (..., L_out, k) view
    return sliding_window_view(xp, kernel, axis=-1)[..., : stride * (out_len - 1) + 1 : stride, :]


def _scatter_taps(gtap: np.ndarray, padded_len: int, kernel: int, stride: int, out_len: int,
                  padding: int) -> np.ndarray:
    """Fold per-tap gradients (..., L_out, k) back onto the padded input, then crop."""
    gx = np.zeros(gtap.shape[:-2] + (padded_len,))
    span = stride * (out_len - 1) + 1
    for j in range(kernel):
        gx[..., j : j + span : stride] += gtap[..., j]
    if padding:
        gx = gx[..., padding:-padding]
    return gx


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of x (B, Cin, L) with weight (Cout, Cin, k)."""
    b, cin, length = x.shape
    cout, wcin, k = weight.shape
    if wcin != cin:
        raise DimensionError(f"conv1d: input has {cin} channels, weight expects {wcin}")
    out_len = conv_output_length(length, k, stride, padding)
    if out_len < 1:
        raise DimensionError(
            f"conv1d: empty output for L={length}, kernel={k}, stride={stride}, padding={padding}")
    xp = _pad(x.data, padding)
    win = _windows(xp, k, stride, out_len)  # (B, Cin, Lo, k)
    w = weight.data
    out = np.einsum("bilk,oik->bol", win, w, optimize=True)
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data[None, :, None]
        parents.append(bias)

    def rule(g):
        gw = np.einsum("bol,bilk->oik", g, win, optimize=True) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gtap = np.einsum("bol,oik->bilk", g, w, optimize=True)
            gx = _scatter_taps(gtap, xp.shape[-1], k, stride, out_len, padding)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return grads

    return _node(out, parents, "conv1d", rule)


def depthwise_conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     padding: int | None = None) -> Tensor:
    """Per-channel convolution; weight is (C, 1, k), length preserved for odd k."""
    b, c, length = x.shape
    k = weight.shape[-1]
    if weight.shape[0] != c:
        raise DimensionError(f"depthwise_conv1d: input has {c} channels, weight has {weight.shape[0]}")
    if padding is None:
        padding = (k - 1) // 2
    out_len = conv_output_length(length, k, 1, padding)
    if out_len < 1:
        raise DimensionError(f"depthwise_conv1d: empty output for L={length}, kernel={k}, padding={padding}")
    xp = _pad(x.data, padding)
    win = _windows(xp, k, 1, out_len)  # (B, C, Lo, k)
    w = weight.data.reshape(c, k)
    out = np.einsum("bclk,ck->bcl", win, w)
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data[None, :, None]
        parents.append(bias)

    def rule(g):
        gw = np.einsum("bcl,bclk->ck", g, win).reshape(weight.shape)
        gx = _scatter_taps(g[..., None] * w[None, :, None, :], xp.shape[-1], k, 1, out_len, padding)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return grads

    return _node(out, parents, "dwconv1d", rule)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def rule(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _node(xd * cdf, (x,), "gelu", rule)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _node(p, (x,), "softmax", rule)


def maxpool1d(x: Tensor, kernel: int = 3, stride: int = 2) -> Tensor:
    """Window maxima; ties send the gradient to the first maximal index."""
    length = x.shape[-1]
    if length < kernel:
        raise DimensionError(f"maxpool1d: length {length} shorter than kernel {kernel}")
    out_len = conv_output_length(length, kernel, stride)
    win = _windows(x.data, kernel, stride, out_len)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def rule(g):
        onehot = (arg[..., None] == np.arange(kernel)) * g[..., None]
        return (_scatter_taps(onehot, length, kernel, stride, out_len, 0),)

    return _node(out, (x,), "maxpool1d", rule)


def batchnorm1d(x: Tensor, weight: Tensor, bias: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (batch, length); running stats updated in place when training."""
    b, c, length = x.shape
    xd = x.data
    if training:
        n = b * length
        if n < 2:
            raise ContractError(f"batchnorm1d in train mode needs B*L >= 2, got {n}")
        mu = xd.mean(axis=(0, 2))
        var = xd.var(axis=(0, 2))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * n / (n - 1)
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None]) * inv[None, :, None]
    gamma = weight.data
    out = xhat * gamma[None, :, None] + bias.data[None, :, None]

    def rule(g):
        gg = (g * xhat).sum(axis=(0, 2))
        gb = g.sum(axis=(0, 2))
        gxhat = g * gamma[None, :, None]
        if training:
            m = b * length
            gx = (inv[None, :, None] / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2), keepdims=True)
            )
        else:
            gx = gxhat * inv[None, :, None]
        return gx, gg, gb

    return _node(out, (x, weight, bias), "batchnorm1d", rule)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x (B, D) @ weight.T (D', D) + bias."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input dim {x.shape[-1]} does not match weight {weight.shape}")
    xd, w = x.data, weight.data
    out = xd @ w.T
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data
        parents.append(bias)

    def rule(g):
        grads = [g @ w, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _node(out, parents, "linear", rule)


# --- parameter containers --------------------------------------------------

class Module:
    """Minimal parameter container: attributes that are tensors, spectral weights,
    modules or lists of modules are discovered by name."""

    training = True

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield full, val
            elif isinstance(val, SpectralWeight):
                yield f"{full}.re", val.re
                yield f"{full}.im", val.im
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = ""):
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, np.ndarray):
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_buffers(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


@dataclass
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    depthwise: bool = False
    bias: bool = True

    def __post_init__(self):
        if self.depthwise and self.in_channels != self.out_channels:
            raise DimensionError("depthwise convolution needs in_channels == out_channels")
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise DimensionError(f"invalid convolution geometry {self}")

    def output_length(self, length: int) -> int:
        return conv_output_length(length, self.kernel, self.stride, self.padding)


class Conv1d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator):
        self.spec = spec
        cin = 1 if spec.depthwise else spec.in_channels
        fan_in = cin * spec.kernel
        self.weight = _uniform(rng, (spec.out_channels, cin, spec.kernel), fan_in)
        self.bias = _uniform(rng, (spec.out_channels,), fan_in) if spec.bias else None

    def forward(self, x: Tensor) -> Tensor:
        s = self.spec
        if s.depthwise:
            return depthwise_conv1d(x, self.weight, self.bias, s.padding)
        return conv1d(x, self.weight, self.bias, s.stride, s.padding)


class BatchNorm1d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.weight = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm1d(x, self.weight, self.bias, self.running_mean, self.running_var,
                           self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.weight = _uniform(rng, (out_features, in_features), in_features)
        self.bias = _uniform(rng, (out_features,), in_features)

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)
