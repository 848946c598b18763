"""Layers: convolution, batch norm, bilinear upsampling and attention.

conv2d, batch_norm and bilinear_upsample are graph primitives with
hand-written backward passes; the attention layers are composed from the
tensor ops.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .tensor import ShapeError, Tensor, _node

BN_EPS = 1e-5


# ---------------------------------------------------------------------------
# module plumbing
# ---------------------------------------------------------------------------

class Module:
    """Minimal container: parameters are Tensor attributes, children are Modules."""

    training = True

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            full = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = ""):
        for key, val in vars(self).items():
            full = f"{prefix}{key}"
            if isinstance(val, Module):
                yield from val.named_buffers(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")
        yield from ((f"{prefix}{k}", v) for k, v in self._buffers().items())

    def _buffers(self) -> dict:
        return {}

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def parameters(self) -> dict:
        return dict(self.named_parameters())

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)


def he_normal(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    return rng.standard_normal(shape) * (gain * math.sqrt(2.0 / fan_in))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

@dataclass
class Conv2dParams:
    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int | None = None

    def __post_init__(self):
        k = self.weight.shape[-1]
        if k not in (1, 3) or self.weight.shape[-2] != k:
            raise ValueError(f"kernel must be 1x1 or 3x3, got {self.weight.shape[-2:]}")
        if self.padding is None:
            self.padding = (k - 1) // 2


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    out = span // stride + 1 if span >= 0 else 0
    # windows may skip trailing zero padding but never a real input pixel
    if out < 1 or (out - 1) * stride + k - pad < n:
        raise ShapeError(f"conv2d: size {n} with k={k}, stride={stride}, pad={pad} "
                         "gives a non-integral output size")
    return out


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Zero-padded cross-correlation, NCHW layout."""
    w, b, s, pad = p.weight, p.bias, p.stride, p.padding
    B, C, H, W = x.shape
    O, Cin, k, _ = w.shape
    if C != Cin:
        raise ShapeError(f"conv2d: input has {C} channels, weight expects {Cin}")
    ho, wo = _out_size(H, k, s, pad), _out_size(W, k, s, pad)
    # columns ordered (kh, kw, C) so the col2im scatter works on contiguous C
    xd = x.data.transpose(0, 2, 3, 1)
    if pad:
        xd = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    if k == 1:
        cols = xd[:, ::s, ::s].reshape(B * ho * wo, C)
    else:
        win = sliding_window_view(xd, (k, k), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * ho * wo, k * k * C)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(O, -1)
    out = (cols @ wmat.T + b.data).reshape(B, ho, wo, O).transpose(0, 3, 1, 2)
    padded_shape = xd.shape

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        dw = (g2.T @ cols).reshape(O, k, k, C).transpose(0, 3, 1, 2)
        db = g2.sum(axis=0)
        if not x.requires_grad:
            return None, dw, db
        dcols = (g2 @ wmat).reshape(B, ho, wo, k, k, C)
        if k == 1 and s == 1:
            dxp = dcols.reshape(B, ho, wo, C)
        else:
            dxp = np.zeros(padded_shape)
            for i in range(k):
                for j in range(k):
                    dxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dcols[:, :, :, i, j]
        if pad:
            dxp = dxp[:, pad:-pad, pad:-pad]
        return dxp.transpose(0, 3, 1, 2), dw, db

    return _node(out, (x, w, b), backward, "conv2d")


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator,
                 stride: int = 1):
        self.weight = T.parameter(he_normal(rng, (out_ch, in_ch, k, k), in_ch * k * k))
        self.bias = T.parameter(np.zeros(out_ch))
        self.stride = stride

    @property
    def params(self) -> Conv2dParams:
        return Conv2dParams(self.weight, self.bias, self.stride)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.params)


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------

@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    mode: str = "train"


def batch_norm(x: Tensor, p: NormParams, update_stats: bool = True) -> Tensor:
    """Per-channel standardization over (B, H, W).

    Train mode normalizes by batch statistics and (optionally) folds them
    into the running estimates; eval mode uses the running estimates only.
    """
    gamma, beta = p.gamma, p.beta
    shape = (1, -1, 1, 1)
    if p.mode == "eval":
        inv = 1.0 / np.sqrt(p.running_var + BN_EPS)
        xhat = (x.data - p.running_mean.reshape(shape)) * inv.reshape(shape)
        out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

        def backward_eval(g):
            return (g * (gamma.data * inv).reshape(shape),
                    (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

        return _node(out, (x, gamma, beta), backward_eval, "batch_norm")

    B, C, H, W = x.shape
    n = B * H * W
    if n < 2:
        raise ShapeError(f"batch_norm in train mode needs B*H*W >= 2, got {x.shape}")
    mu = x.data.mean(axis=(0, 2, 3))
    xc = x.data - mu.reshape(shape)
    var = (xc * xc).mean(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = xc * inv.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)
    if update_stats:
        m = p.momentum
        p.running_mean[...] = (1 - m) * p.running_mean + m * mu
        p.running_var[...] = (1 - m) * p.running_var + m * var * (n / (n - 1))

    def backward(g):
        dbeta = g.sum(axis=(0, 2, 3))
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dxhat = g * gamma.data.reshape(shape)
        dx = (dxhat - dxhat.mean(axis=(0, 2, 3), keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)) * inv.reshape(shape)
        return dx, dgamma, dbeta

    return _node(out, (x, gamma, beta), backward, "batch_norm")


class BatchNorm2d(Module):
    # running statistics are refreshed in train mode unless this is False
    update_stats = True

    def __init__(self, ch: int, momentum: float = 0.1):
        self.gamma = T.parameter(np.ones(ch))
        self.beta = T.parameter(np.zeros(ch))
        self.running_mean = np.zeros(ch)
        self.running_var = np.ones(ch)
        self.momentum = momentum

    def _buffers(self) -> dict:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    @property
    def params(self) -> NormParams:
        return NormParams(self.gamma, self.beta, self.running_mean, self.running_var,
                          self.momentum, "train" if self.training else "eval")

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.params, update_stats=self.update_stats)


class ConvBNReLU(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, rng, stride: int = 1):
        self.conv = Conv2d(in_ch, out_ch, k, rng, stride)
        self.bn = BatchNorm2d(out_ch)

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.conv(x)))


# ---------------------------------------------------------------------------
# bilinear upsampling
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=64)
def interp_matrix(n: int, factor: int) -> np.ndarray:
    """(factor*n, n) half-pixel bilinear weights; row i samples (i+0.5)/f - 0.5."""
    dst = np.arange(n * factor)
    src = np.clip((dst + 0.5) / factor - 0.5, 0.0, n - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = src - i0
    m = np.zeros((n * factor, n))
    np.add.at(m, (dst, i0), 1.0 - frac)
    np.add.at(m, (dst, i1), frac)
    m.setflags(write=False)
    return m


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    if factor not in (1, 2, 4, 8, 16, 32):
        raise ValueError(f"unsupported upsampling factor {factor}")
    if factor == 1:
        return x
    _, _, H, W = x.shape
    ah, aw = interp_matrix(H, factor), interp_matrix(W, factor)
    out = ah @ (x.data @ aw.T)

    def backward(g):
        return (ah.T @ (g @ aw),)

    return _node(out, (x,), backward, "bilinear_upsample")


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor

    def __post_init__(self):
        if not (self.wq.shape[1] == self.wk.shape[1] == self.wv.shape[1]):
            raise ShapeError("attention projections must share d_attn: "
                             f"{self.wq.shape}, {self.wk.shape}, {self.wv.shape}")

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.wq.shape[1])


def attend(tokens: Tensor, p: AttentionParams, return_weights: bool = False):
    """Single-head attention over (G, N, C) token groups -> (G, N, d_attn)."""
    G, N, C = tokens.shape
    flat = T.reshape(tokens, (G * N, C))
    d = p.wq.shape[1]
    q = T.reshape(T.matmul(flat, p.wq), (G, N, d))
    k = T.reshape(T.matmul(flat, p.wk), (G, N, d))
    v = T.reshape(T.matmul(flat, p.wv), (G, N, d))
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), p.scale)
    weights = T.softmax(scores, axis=-1)
    out = T.matmul(weights, v)
    return (out, weights) if return_weights else out


def self_attention(x: Tensor, p: AttentionParams) -> Tensor:
    """Full attention among all H*W positions of each image."""
    B, C, H, W = x.shape
    tokens = T.transpose(T.reshape(x, (B, C, H * W)), (0, 2, 1))
    out = attend(tokens, p)
    return T.reshape(T.transpose(out, (0, 2, 1)), (B, -1, H, W))


def axial_attention(x: Tensor, p_row: AttentionParams, p_col: AttentionParams) -> Tensor:
    """Row pass then column pass, each wrapped in a residual connection."""
    B, C, H, W = x.shape
    rows = T.reshape(T.transpose(x, (0, 2, 3, 1)), (B * H, W, C))
    attn = T.transpose(T.reshape(attend(rows, p_row), (B, H, W, C)), (0, 3, 1, 2))
    y = T.add(x, attn)
    cols = T.reshape(T.transpose(y, (0, 3, 2, 1)), (B * W, H, C))
    attn = T.transpose(T.reshape(attend(cols, p_col), (B, W, H, C)), (0, 3, 2, 1))
    return T.add(y, attn)


class Attention(Module):
    def __init__(self, d_in: int, d_attn: int, rng, init_scale: float = 0.1):
        self.wq = T.parameter(he_normal(rng, (d_in, d_attn), d_in, init_scale))
        self.wk = T.parameter(he_normal(rng, (d_in, d_attn), d_in, init_scale))
        self.wv = T.parameter(he_normal(rng, (d_in, d_attn), d_in, init_scale))

    @property
    def params(self) -> AttentionParams:
        return AttentionParams(self.wq, self.wk, self.wv)

    def __call__(self, x: Tensor) -> Tensor:
        return self_attention(x, self.params)


class AxialAttention(Module):
    def __init__(self, ch: int, rng):
        self.row = Attention(ch, ch, rng)
        self.col = Attention(ch, ch, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return axial_attention(x, self.row.params, self.col.params)


class frozen_stats:
    """Context manager: batch-norm layers keep using batch statistics but
    stop folding them into the running estimates."""

    def __init__(self, model: Module):
        self.layers = [m for m in model.modules() if isinstance(m, BatchNorm2d)]

    def __enter__(self):
        self.prev = [m.update_stats for m in self.layers]
        for m in self.layers:
            m.update_stats = False
        return self

    def __exit__(self, *exc):
        for m, prev in zip(self.layers, self.prev):
            m.update_stats = prev
        return False
