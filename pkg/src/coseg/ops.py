"""Differentiable primitives used by the co-segmentation network.

All 4-D data is laid out (batch, channel, height, width).  Forward passes are
pure functions of their array inputs and keyword parameters, so a recorded
graph can be replayed exactly; anything random (dropout masks) or stateful
(batchnorm running statistics) lives in the thin wrappers below the
Function classes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Context, Function, Tensor

__all__ = [
    "conv2d",
    "relu",
    "sigmoid",
    "activation",
    "batchnorm2d",
    "BatchNormStats",
    "dropout",
    "upsample_nearest2x",
    "avgpool2x2",
    "maxpool2x2",
    "pool_spatial_to_channelvec",
    "pool_channels_to_spatialmap",
    "fully_connected",
    "broadcast_mul",
    "add",
    "reshape",
    "sum_all",
    "softmax_cross_entropy",
]


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    """Rows are output locations (n, i, j); columns are (c, di, dj)."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


class Conv2d(Function):
    @staticmethod
    def forward(ctx, x, w, b, stride=1, pad=0):
        n, _, h, wd = x.shape
        cout, cin, k, _ = w.shape
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        cols, ho, wo = _im2col(xp, k, stride)
        out = cols @ w.reshape(cout, -1).T + b
        ctx.save(cols=cols, w=w, xshape=x.shape, pshape=xp.shape, stride=stride, pad=pad, ho=ho, wo=wo)
        return out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    @staticmethod
    def backward(ctx, grad):
        w, s, p = ctx.w, ctx.stride, ctx.pad
        cout, cin, k, _ = w.shape
        n, _, h, wd = ctx.xshape
        gmat = grad.transpose(0, 2, 3, 1).reshape(-1, cout)
        dw = (gmat.T @ ctx.cols).reshape(w.shape)
        db = grad.sum(axis=(0, 2, 3))
        # dx: full correlation of the stride-dilated gradient with the flipped kernel
        hd, wdd = (ctx.ho - 1) * s + 1, (ctx.wo - 1) * s + 1
        if s > 1:
            gd = np.zeros((n, cout, hd, wdd), dtype=grad.dtype)
            gd[:, :, ::s, ::s] = grad
        else:
            gd = grad
        gdp = np.pad(gd, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        cols2, hf, wf = _im2col(gdp, k, 1)
        wflip = w[:, :, ::-1, ::-1].transpose(0, 2, 3, 1).reshape(cout * k * k, cin)
        part = (cols2 @ wflip).reshape(n, hf, wf, cin).transpose(0, 3, 1, 2)
        dxp = np.zeros(ctx.pshape, dtype=grad.dtype)
        dxp[:, :, :hf, :wf] = part
        dx = dxp[:, :, p : p + h, p : p + wd] if p else dxp
        return dx, dw, db


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding; output extent floors."""
    x, weight, bias = _tensor(x), _tensor(weight), _tensor(bias)
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"conv2d expects input NCHW and square kernel, got input {x.shape}, weight {weight.shape}")
    if weight.shape[1] != x.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match weight {weight.shape}")
    k = weight.shape[2]
    if k < 1 or stride < 1 or pad < 0:
        raise ValueError(f"invalid conv2d geometry k={k} stride={stride} pad={pad}")
    if x.shape[2] + 2 * pad < k or x.shape[3] + 2 * pad < k:
        raise ValueError(f"conv2d kernel {weight.shape} larger than padded input {x.shape} (pad={pad})")
    return Conv2d.apply(x, weight, bias, stride=int(stride), pad=int(pad))


# ---------------------------------------------------------------------------
# elementwise activations


class ReLU(Function):
    @staticmethod
    def forward(ctx, x):
        mask = x > 0
        ctx.save(mask=mask)
        return np.where(mask, x, 0).astype(x.dtype, copy=False)

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx.mask,)


class Sigmoid(Function):
    @staticmethod
    def forward(ctx, x):
        # split by sign so exp never overflows
        e = np.exp(-np.abs(x))
        y = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
        ctx.save(y=y)
        return y

    @staticmethod
    def backward(ctx, grad):
        y = ctx.y
        return (grad * y * (1 - y),)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(_tensor(x))


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(_tensor(x))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# batch normalisation


@dataclass
class BatchNormStats:
    """Running mean/variance of one batchnorm layer."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64, momentum: float = 0.1, eps: float = 1e-5):
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype), momentum, eps)


class BatchNormTrain(Function):
    @staticmethod
    def forward(ctx, x, gamma, beta, eps=1e-5):
        axes = (0, 2, 3)
        mean = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
        inv = 1 / np.sqrt(var + eps)
        xhat = (x - mean) * inv
        ctx.save(xhat=xhat, inv=inv, gamma=gamma)
        return gamma.reshape(1, -1, 1, 1) * xhat + beta.reshape(1, -1, 1, 1)

    @staticmethod
    def backward(ctx, grad):
        xhat, inv = ctx.xhat, ctx.inv
        axes = (0, 2, 3)
        m = grad.size // grad.shape[1]
        dgamma = (grad * xhat).sum(axis=axes)
        dbeta = grad.sum(axis=axes)
        dxhat = grad * ctx.gamma.reshape(1, -1, 1, 1)
        dx = (inv / m) * (
            m * dxhat
            - dxhat.sum(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
        )
        return dx, dgamma, dbeta


class BatchNormEval(Function):
    @staticmethod
    def forward(ctx, x, gamma, beta, mean=None, var=None, eps=1e-5):
        inv = (1 / np.sqrt(var + eps)).astype(x.dtype).reshape(1, -1, 1, 1)
        xhat = (x - mean.astype(x.dtype).reshape(1, -1, 1, 1)) * inv
        ctx.save(xhat=xhat, inv=inv, gamma=gamma)
        return gamma.reshape(1, -1, 1, 1) * xhat + beta.reshape(1, -1, 1, 1)

    @staticmethod
    def backward(ctx, grad):
        axes = (0, 2, 3)
        dx = grad * ctx.gamma.reshape(1, -1, 1, 1) * ctx.inv
        return dx, (grad * ctx.xhat).sum(axis=axes), grad.sum(axis=axes)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, stats: BatchNormStats, training: bool) -> Tensor:
    """Per-channel normalisation; train mode also updates ``stats`` in place."""
    x, gamma, beta = _tensor(x), _tensor(gamma), _tensor(beta)
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ValueError(f"batchnorm2d shape mismatch: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    if not training:
        return BatchNormEval.apply(x, gamma, beta, mean=stats.mean, var=stats.var, eps=stats.eps)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if count < 2:
        raise ValueError(f"batchnorm2d in train mode needs N*H*W >= 2, got input {x.shape}")
    out = BatchNormTrain.apply(x, gamma, beta, eps=stats.eps)
    mom = stats.momentum
    mean = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3)) * (count / (count - 1))
    stats.mean = ((1 - mom) * stats.mean + mom * mean).astype(stats.mean.dtype)
    stats.var = ((1 - mom) * stats.var + mom * var).astype(stats.var.dtype)
    return out


# ---------------------------------------------------------------------------
# dropout


class MaskScale(Function):
    @staticmethod
    def forward(ctx, x, mask=None, scale=1.0):
        m = mask.astype(x.dtype) * x.dtype.type(scale)
        ctx.save(m=m)
        return x * m

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx.m,)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    x = _tensor(x)
    if not training or p == 0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs a seeded generator")
    mask = rng.random(x.shape) >= p
    return MaskScale.apply(x, mask=mask, scale=1.0 / (1.0 - p))


# ---------------------------------------------------------------------------
# resampling and pooling


class Upsample2x(Function):
    @staticmethod
    def forward(ctx, x):
        return x.repeat(2, axis=2).repeat(2, axis=3)

    @staticmethod
    def backward(ctx, grad):
        n, c, h, w = grad.shape
        return (grad.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)),)


def upsample_nearest2x(x: Tensor) -> Tensor:
    x = _tensor(x)
    if x.ndim != 4:
        raise ValueError(f"upsample expects NCHW input, got {x.shape}")
    return Upsample2x.apply(x)


class AvgPool2x2(Function):
    @staticmethod
    def forward(ctx, x):
        n, c, h, w = x.shape
        return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    @staticmethod
    def backward(ctx, grad):
        g = grad.repeat(2, axis=2).repeat(2, axis=3) * grad.dtype.type(0.25)
        return (g,)


class MaxPool2x2(Function):
    @staticmethod
    def forward(ctx, x):
        n, c, h, w = x.shape
        blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        idx = blocks.argmax(axis=-1)
        ctx.save(idx=idx, shape=x.shape)
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    @staticmethod
    def backward(ctx, grad):
        n, c, h, w = ctx.shape
        blocks = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad.dtype)
        np.put_along_axis(blocks, ctx.idx[..., None], grad[..., None], axis=-1)
        dx = blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (dx,)


def _check_even(x: Tensor, name: str) -> None:
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"{name} expects NCHW input with even extents, got {x.shape}")


def avgpool2x2(x: Tensor) -> Tensor:
    x = _tensor(x)
    _check_even(x, "avgpool2x2")
    return AvgPool2x2.apply(x)


def maxpool2x2(x: Tensor) -> Tensor:
    x = _tensor(x)
    _check_even(x, "maxpool2x2")
    return MaxPool2x2.apply(x)


class MeanAxes(Function):
    @staticmethod
    def forward(ctx, x, axes=()):
        ctx.save(shape=x.shape, axes=axes, count=int(np.prod([x.shape[a] for a in axes])))
        return x.mean(axis=axes)

    @staticmethod
    def backward(ctx, grad):
        g = np.expand_dims(grad, ctx.axes) / grad.dtype.type(ctx.count)
        return (np.broadcast_to(g, ctx.shape).copy(),)


def pool_spatial_to_channelvec(x: Tensor) -> Tensor:
    """Global average over H, W: (N, C, H, W) -> (N, C)."""
    x = _tensor(x)
    if x.ndim != 4 or x.shape[2] * x.shape[3] < 1:
        raise ValueError(f"expected NCHW input with H*W >= 1, got {x.shape}")
    return MeanAxes.apply(x, axes=(2, 3))


def pool_channels_to_spatialmap(x: Tensor) -> Tensor:
    """Average over channels: (N, C, H, W) -> (N, H, W)."""
    x = _tensor(x)
    if x.ndim != 4 or x.shape[1] < 1:
        raise ValueError(f"expected NCHW input with C >= 1, got {x.shape}")
    return MeanAxes.apply(x, axes=(1,))


# ---------------------------------------------------------------------------
# dense layers and broadcasting arithmetic


class Affine(Function):
    @staticmethod
    def forward(ctx, x, w, b):
        ctx.save(x=x, w=w)
        return x @ w + b

    @staticmethod
    def backward(ctx, grad):
        return grad @ ctx.w.T, ctx.x.T @ grad, grad.sum(axis=0)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` with weight laid out (D_in, D_out)."""
    x, weight, bias = _tensor(x), _tensor(weight), _tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"fully_connected dimension mismatch: input {x.shape} vs weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ValueError(f"fully_connected bias {bias.shape} does not match weight {weight.shape}")
    return Affine.apply(x, weight, bias)


def _feature_view(shape: tuple[int, ...], other: tuple[int, ...]) -> tuple[int, ...]:
    # (N, C) against NCHW expands over H, W; (N, H, W) against NCHW expands over C.
    if len(other) == 4 and len(shape) == 2:
        return shape + (1, 1)
    if len(other) == 4 and len(shape) == 3:
        return (shape[0], 1) + shape[1:]
    return shape


def _broadcast_shapes(a: tuple, b: tuple) -> tuple[tuple, tuple, tuple]:
    va, vb = _feature_view(a, b), _feature_view(b, a)
    try:
        out = np.broadcast_shapes(va, vb)
    except ValueError:
        raise ValueError(f"shapes {a} and {b} are not broadcast-compatible") from None
    return va, vb, out


def _reduce_to(grad: np.ndarray, view: tuple, shape: tuple) -> np.ndarray:
    lead = grad.ndim - len(view)
    g = grad.sum(axis=tuple(range(lead))) if lead else grad
    axes = tuple(i for i, (v, o) in enumerate(zip(view, g.shape)) if v == 1 and o != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class BroadcastMul(Function):
    @staticmethod
    def forward(ctx, a, b):
        va, vb, _ = _broadcast_shapes(a.shape, b.shape)
        ra, rb = a.reshape(va), b.reshape(vb)
        ctx.save(a=ra, b=rb, va=va, vb=vb, sa=a.shape, sb=b.shape)
        return ra * rb

    @staticmethod
    def backward(ctx, grad):
        ga = _reduce_to(grad * ctx.b, ctx.va, ctx.sa)
        gb = _reduce_to(grad * ctx.a, ctx.vb, ctx.sb)
        return ga, gb


class BroadcastAdd(Function):
    @staticmethod
    def forward(ctx, a, b):
        va, vb, _ = _broadcast_shapes(a.shape, b.shape)
        ctx.save(va=va, vb=vb, sa=a.shape, sb=b.shape)
        return a.reshape(va) + b.reshape(vb)

    @staticmethod
    def backward(ctx, grad):
        return _reduce_to(grad, ctx.va, ctx.sa), _reduce_to(grad, ctx.vb, ctx.sb)


def broadcast_mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product.

    Same-rank and trailing-aligned shapes follow numpy rules.  Against a
    4-D feature map, a 2-D operand is read as (N, C) and a 3-D operand as
    (N, H, W), so channel and spatial attention broadcast the way they are
    meant to.
    """
    a, b = _tensor(a), _tensor(b)
    _broadcast_shapes(a.shape, b.shape)
    return BroadcastMul.apply(a, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    _broadcast_shapes(a.shape, b.shape)
    return BroadcastAdd.apply(a, b)


class Reshape(Function):
    @staticmethod
    def forward(ctx, x, shape=()):
        ctx.save(shape=x.shape)
        return x.reshape(shape)

    @staticmethod
    def backward(ctx, grad):
        return (grad.reshape(ctx.shape),)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _tensor(x)
    return Reshape.apply(x, shape=tuple(int(s) for s in shape))


class SumAll(Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save(shape=x.shape)
        return np.asarray(x.sum())

    @staticmethod
    def backward(ctx, grad):
        return (np.broadcast_to(grad, ctx.shape).copy(),)


def sum_all(x: Tensor) -> Tensor:
    return SumAll.apply(_tensor(x))


# ---------------------------------------------------------------------------
# loss


class SoftmaxCrossEntropy(Function):
    @staticmethod
    def forward(ctx, logits, target=None):
        shifted = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - lse
        picked = np.take_along_axis(logp, target[:, None], axis=1)
        ctx.save(logp=logp, target=target)
        return np.asarray(-picked.mean(), dtype=logits.dtype)

    @staticmethod
    def backward(ctx, grad):
        p = np.exp(ctx.logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, ctx.target[:, None], 1, axis=1)
        m = ctx.target.size
        return ((p - onehot) * (grad / m),)


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean per-pixel cross entropy of (N, K, H, W) logits against integer labels (N, H, W)."""
    logits = _tensor(logits)
    t = np.asarray(target)
    if logits.ndim != 4 or t.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ValueError(f"target shape {t.shape} does not match logits {logits.shape}")
    k = logits.shape[1]
    if t.size and (t.min() < 0 or t.max() > k - 1 or not np.all(t == np.round(t))):
        raise ValueError(f"cross-entropy targets must be class indices in [0, {k - 1}]")
    return SoftmaxCrossEntropy.apply(logits, target=t.astype(np.int64))
