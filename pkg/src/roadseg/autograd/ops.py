"""Differentiable operations over :class:`~roadseg.autograd.tensor.Tensor`.

Elementwise ops broadcast like numpy; gradients are summed back to the
operand shapes. Convolution uses the cross-correlation convention (no
kernel flip).
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, _as_tensor, record_op


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast dimensions so ``grad`` matches ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    return record_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data
    return record_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    return record_op(
        out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    return record_op(
        out, (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return record_op(-a.data, (a,), lambda g: (-g,))


def pow_scalar(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    e = float(exponent)
    out = a.data ** e
    return record_op(out, (a,), lambda g: (g * e * a.data ** (e - 1.0),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return record_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return record_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def arctan(a) -> Tensor:
    a = _as_tensor(a)
    return record_op(np.arctan(a.data), (a,), lambda g: (g / (1.0 + a.data * a.data),))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to the first operand."""
    a, b = _as_tensor(a), _as_tensor(b)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)
    return record_op(
        out, (a, b),
        lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
    )


def minimum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)
    return record_op(
        out, (a, b),
        lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
    )


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient is zero outside the open interval."""
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)
    return record_op(out, (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions and shaping


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, a.shape).copy(),)

    return record_op(out, (a,), backward_fn)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)
    return record_op(out, (a,), lambda g: (g.reshape(a.shape),))


def flatten(a) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    a = _as_tensor(a)
    return reshape(a, (a.shape[0], -1))


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return record_op(out, (a,), lambda g: (g.transpose(inverse),))


def take_rows(a, indices) -> Tensor:
    """Gather along axis 0; backward scatter-adds (duplicates accumulate)."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = a.data[idx]

    def backward_fn(g):
        da = np.zeros_like(a.data)
        np.add.at(da, idx, g)
        return (da,)

    return record_op(out, (a,), backward_fn)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    out = a.data @ b.data
    return record_op(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# ---------------------------------------------------------------------------
# layers


def dense(x, w, b) -> Tensor:
    """x[B,I] @ w[I,O] + b[O]."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense shapes disagree: x {x.shape} vs w {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"dense bias shape {b.shape} does not match output dim {w.shape[1]}")
    out = x.data @ w.data + b.data
    return record_op(
        out, (x, w, b),
        lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)),
    )


def _conv_patches(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols


def conv2d(x, k, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate x[B,C,H,W] with k[F,C,Kh,Kw]."""
    x, k = _as_tensor(x), _as_tensor(k)
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D operands, got {x.shape} and {k.shape}")
    if x.shape[1] != k.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {k.shape}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    bsz, c, h, w = x.shape
    f, _, kh, kw = k.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d output dims non-positive for input {x.shape}, kernel {k.shape}, "
            f"stride {stride}, padding {padding}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _conv_patches(xp, kh, kw, stride, oh, ow)
    out = np.einsum("bcijhw,fcij->bfhw", cols, k.data, optimize=True)

    def backward_fn(g):
        dk = np.einsum("bcijhw,bfhw->fcij", cols, g, optimize=True)
        dcols = np.einsum("bfhw,fcij->bcijhw", g, k.data, optimize=True)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, i, j]
        dx = dxp[:, :, padding:padding + h, padding:padding + w]
        return (dx, dk)

    return record_op(out, (x, k), backward_fn)


def upsample2d_nearest(x, factor: int) -> Tensor:
    """Replicate each pixel factor x factor; backward sums over blocks."""
    x = _as_tensor(x)
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if x.ndim != 4:
        raise ShapeError(f"upsample2d expects 4-D input, got {x.shape}")
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward_fn(g):
        b, c, fh, fw = g.shape
        blocks = g.reshape(b, c, fh // factor, factor, fw // factor, factor)
        return (blocks.sum(axis=(3, 5)),)

    return record_op(out, (x,), backward_fn)


class RunningStats:
    """Per-channel running mean/variance for batch normalization."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels, dtype=np.float64)
        self.var = np.ones(channels, dtype=np.float64)

    def copy(self) -> "RunningStats":
        out = RunningStats(self.mean.shape[0])
        out.mean = self.mean.copy()
        out.var = self.var.copy()
        return out


def batchnorm2d(x, gamma, beta, running: RunningStats, mode: str = "train",
                momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Normalize x[B,C,H,W] per channel over (B,H,W).

    Train mode uses batch statistics and updates ``running``; eval mode
    normalizes with the stored running statistics.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects 4-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm parameter shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")

    view = (1, c, 1, 1)
    if mode == "eval":
        inv_std = 1.0 / np.sqrt(running.var + eps)
        xhat = (x.data - running.mean.reshape(view)) * inv_std.reshape(view)
        out = gamma.data.reshape(view) * xhat + beta.data.reshape(view)

        def backward_eval(g):
            dx = g * (gamma.data * inv_std).reshape(view)
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            return (dx, dgamma, dbeta)

        return record_op(out, (x, gamma, beta), backward_eval)

    n = x.shape[0] * x.shape[2] * x.shape[3]
    mean = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + eps)
    xc = x.data - mean.reshape(view)
    xhat = xc * inv_std.reshape(view)
    out = gamma.data.reshape(view) * xhat + beta.data.reshape(view)

    unbiased = var * n / max(n - 1, 1)
    running.mean = (1.0 - momentum) * running.mean + momentum * mean
    running.var = (1.0 - momentum) * running.var + momentum * unbiased

    def backward_train(g):
        dxhat = g * gamma.data.reshape(view)
        dvar = (dxhat * xc).sum(axis=(0, 2, 3)) * -0.5 * inv_std ** 3
        dmean = -(dxhat.sum(axis=(0, 2, 3)) * inv_std) - dvar * 2.0 * xc.mean(axis=(0, 2, 3))
        dx = (dxhat * inv_std.reshape(view)
              + dvar.reshape(view) * 2.0 * xc / n
              + dmean.reshape(view) / n)
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        return (dx, dgamma, dbeta)

    return record_op(out, (x, gamma, beta), backward_train)


# ---------------------------------------------------------------------------
# activations


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return record_op(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    x = _as_tensor(x)
    mask = x.data > 0
    scale = np.where(mask, 1.0, slope)
    return record_op(x.data * scale, (x,), lambda g: (g * scale,))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    # exp of -|x| cannot overflow; both branches are algebraically 1/(1+e^-x)
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return record_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return record_op(out, (x,), backward_fn)


def log_softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable log(softmax(x)) composed from primitive ops.

    The max shift is a constant; the two shift contributions cancel in
    the value and the gradient is exactly ``g - softmax * sum(g)``.
    """
    x = _as_tensor(x)
    shift = x.data.max(axis=axis, keepdims=True)
    shifted = sub(x, shift)
    lse = log(tsum(exp(shifted), axis=axis, keepdims=True))
    return sub(shifted, lse)


def dropout(x, rate: float, mode: str = "train", rng: Optional[np.random.Generator] = None) -> Tensor:
    """Zero each element with probability ``rate``, scaling survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = _as_tensor(x)
    if mode == "eval" or rate == 0.0:
        return record_op(x.data.copy(), (x,), lambda g: (g,))
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    if rng is None:
        raise ValueError("dropout in train mode requires an rng")
    keep = rng.random(x.shape) >= rate
    scale = keep / (1.0 - rate)
    return record_op(x.data * scale, (x,), lambda g: (g * scale,))


# ---------------------------------------------------------------------------
# losses

BCE_EPS = 1e-7


def bce_loss(p, y) -> Tensor:
    """Mean binary cross-entropy; probabilities are clamped to [1e-7, 1-1e-7]."""
    p, y = _as_tensor(p), _as_tensor(y)
    if p.shape != y.shape:
        raise ShapeError(f"bce_loss shapes disagree: {p.shape} vs {y.shape}")
    pc = clip(p, BCE_EPS, 1.0 - BCE_EPS)
    term = add(mul(y, log(pc)), mul(sub(1.0, y), log(sub(1.0, pc))))
    return neg(tmean(term))


# operator sugar -------------------------------------------------------------

Tensor.__add__ = add
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = sub
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = mul
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__truediv__ = div
Tensor.__rtruediv__ = lambda self, other: div(other, self)
Tensor.__neg__ = neg
Tensor.__pow__ = pow_scalar
Tensor.__matmul__ = matmul
Tensor.sum = tsum
Tensor.mean = tmean
Tensor.reshape = reshape
