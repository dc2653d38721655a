"""Differentiable primitives.

Every function takes and returns :class:`Tensor` and registers a backward
closure on the active tape. Convolutions use an im2col formulation so the
heavy lifting is a single GEMM; reductions always run in a fixed order,
keeping runs bit-reproducible for a fixed thread count.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, record_op, unbroadcast

__all__ = [
    "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt", "square", "absolute",
    "matmul", "reshape", "concat", "sum_", "mean_", "relu", "sigmoid", "xlogx",
    "softmax", "dense", "conv2d", "depthwise_conv2d", "batch_norm", "BatchNormState",
    "global_avg_pool", "dropout", "softmax_cross_entropy", "sigmoid_bce",
    "mix", "scale_channels",
]


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(out, g):
        if a.requires_grad:
            a.accumulate_grad(unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(unbroadcast(g, b.shape))

    return record_op(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(out, g):
        if a.requires_grad:
            a.accumulate_grad(unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(unbroadcast(-g, b.shape))

    return record_op(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(out, g):
        if a.requires_grad:
            a.accumulate_grad(unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(unbroadcast(g * a.data, b.shape))

    return record_op(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(out, g):
        if a.requires_grad:
            a.accumulate_grad(unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return record_op(a.data / b.data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(out, g):
        if a.requires_grad:
            a.accumulate_grad(-g)

    return record_op(-a.data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)

    def backward(out, g):
        if a.requires_grad:
            a.accumulate_grad(g * out.data)

    return record_op(np.exp(a.data), (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward(out, g):
        if a.requires_grad:
            a.accumulate_grad(g / a.data)

    return record_op(np.log(a.data), (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(out, g):
        if a.requires_grad:
            a.accumulate_grad(g * 0.5 / out.data)

    return record_op(out_data, (a,), backward)


def square(a) -> Tensor:
    a = as_tensor(a)

    def backward(out, g):
        if a.requires_grad:
            a.accumulate_grad(g * 2.0 * a.data)

    return record_op(a.data * a.data, (a,), backward)


def absolute(a) -> Tensor:
    a = as_tensor(a)

    def backward(out, g):
        if a.requires_grad:
            a.accumulate_grad(g * np.sign(a.data))

    return record_op(np.abs(a.data), (a,), backward)


def xlogx(a) -> Tensor:
    """x * log(x) with the 0*log(0) := 0 convention.

    The backward pass uses the same mask, so saturated softmax entries
    (exact zeros) contribute neither value nor gradient.
    """
    a = as_tensor(a)
    mask = a.data > 0
    safe = np.where(mask, a.data, 1.0)
    out_data = np.where(mask, a.data * np.log(safe), 0.0)

    def backward(out, g):
        if a.requires_grad:
            a.accumulate_grad(g * np.where(mask, np.log(safe) + 1.0, 0.0))

    return record_op(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# shape manipulation and reductions
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def backward(out, g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.shape))

    return record_op(a.data.reshape(shape), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(out, g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t.accumulate_grad(piece)

    return record_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(out, g):
        if not a.requires_grad:
            return
        if axis is None:
            a.accumulate_grad(np.broadcast_to(g, a.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(g, a.shape))

    return record_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def backward(out, g):
        if not a.requires_grad:
            return
        if axis is None:
            a.accumulate_grad(np.broadcast_to(g / count, a.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(g / count, a.shape))

    return record_op(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")

    def backward(out, g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return record_op(a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def backward(out, g):
        if a.requires_grad:
            a.accumulate_grad(g * mask)

    return record_op(np.where(mask, a.data, 0.0), (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(out, g):
        if a.requires_grad:
            a.accumulate_grad(g * out.data * (1.0 - out.data))

    return record_op(out_data, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(out, g):
        if a.requires_grad:
            s = out.data
            a.accumulate_grad(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return record_op(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# dense / convolution kernels
# ---------------------------------------------------------------------------

def dense(x, w, b=None) -> Tensor:
    """Affine map: x @ w (+ b)."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def _pad_amounts(extent: int, kernel: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Return (out_extent, pad_before, pad_after) for one spatial axis."""
    if padding == "same":
        out = -(-extent // stride)  # ceil division
        total = max((out - 1) * stride + kernel - extent, 0)
        return out, total // 2, total - total // 2
    if padding == "valid":
        return (extent - kernel) // stride + 1, 0, 0
    raise ValueError(f"unknown padding {padding!r}")


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Gather (N, OH, OW, kh*kw*C) patches from a padded NHWC array."""
    n, _, _, c = x.shape
    cols = np.empty((n, oh, ow, kh * kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i * kw + j, :] = x[:, i : i + stride * oh : stride,
                                             j : j + stride * ow : stride, :]
    return cols.reshape(n, oh, ow, kh * kw * c)


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int,
            oh: int, ow: int) -> np.ndarray:
    """Scatter-add the adjoint of :func:`_im2col` (fixed accumulation order)."""
    n, h, w, c = shape
    x = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(n, oh, ow, kh * kw, c)
    for i in range(kh):
        for j in range(kw):
            x[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += \
                cols[:, :, :, i * kw + j, :]
    return x


def conv2d(x, kernel, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation of an NHWC input with a (kh, kw, Cin, Cout) kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input and khkwCinCout kernel, "
                         f"got {x.shape} and {kernel.shape}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if cin != kcin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin} channels, kernel "
                         f"expects {kcin} (input {x.shape}, kernel {kernel.shape})")
    oh, pt, pb = _pad_amounts(h, kh, stride, padding)
    ow, pl, pr = _pad_amounts(w, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    out_data = (cols.reshape(-1, kh * kw * cin) @ kernel.data.reshape(-1, cout)) \
        .reshape(n, oh, ow, cout)

    def backward(out, g):
        g2 = g.reshape(-1, cout)
        if kernel.requires_grad:
            dk = cols.reshape(-1, kh * kw * cin).T @ g2
            kernel.accumulate_grad(dk.reshape(kernel.shape))
        if x.requires_grad:
            dcols = g2 @ kernel.data.reshape(-1, cout).T
            dxp = _col2im(dcols.reshape(n, oh, ow, -1), xp.shape, kh, kw, stride, oh, ow)
            if pt or pb or pl or pr:
                dxp = dxp[:, pt : pt + h, pl : pl + w, :]
            x.accumulate_grad(dxp)

    return record_op(out_data, (x, kernel), backward)


def depthwise_conv2d(x, kernel, stride: int = 1, padding: str = "same") -> Tensor:
    """Per-channel spatial convolution with a (kh, kw, C) kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 3:
        raise ShapeError(f"depthwise_conv2d expects NHWC input and khkwC kernel, "
                         f"got {x.shape} and {kernel.shape}")
    n, h, w, c = x.shape
    kh, kw, kc = kernel.shape
    if c != kc:
        raise ShapeError(f"depthwise_conv2d channel mismatch: input has {c} channels, "
                         f"kernel has {kc} (input {x.shape}, kernel {kernel.shape})")
    oh, pt, pb = _pad_amounts(h, kh, stride, padding)
    ow, pl, pr = _pad_amounts(w, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x.data
    out_data = np.zeros((n, oh, ow, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out_data += xp[:, i : i + stride * oh : stride,
                           j : j + stride * ow : stride, :] * kernel.data[i, j]

    def backward(out, g):
        if kernel.requires_grad:
            dk = np.empty_like(kernel.data)
            for i in range(kh):
                for j in range(kw):
                    dk[i, j] = (xp[:, i : i + stride * oh : stride,
                                   j : j + stride * ow : stride, :] * g).sum(axis=(0, 1, 2))
            kernel.accumulate_grad(dk)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + stride * oh : stride,
                        j : j + stride * ow : stride, :] += g * kernel.data[i, j]
            if pt or pb or pl or pr:
                dxp = dxp[:, pt : pt + h, pl : pl + w, :]
            x.accumulate_grad(dxp)

    return record_op(out_data, (x, kernel), backward)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

class BatchNormState:
    """Moving mean/variance for one normalization site.

    These are running statistics, not trained parameters; they are never
    mixed and always live outside template banks.
    """

    __slots__ = ("mean", "var")

    def __init__(self, channels: int, dtype=np.float64):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def copy(self) -> "BatchNormState":
        s = BatchNormState.__new__(BatchNormState)
        s.mean = self.mean.copy()
        s.var = self.var.copy()
        return s

    def load(self, other: "BatchNormState") -> None:
        self.mean[...] = other.mean
        self.var[...] = other.var


def batch_norm(x, beta, gamma, state: BatchNormState, training: bool,
               momentum: float = 0.99, eps: float = 1e-3,
               update_stats: bool = True) -> Tensor:
    """Channel-wise batch normalization over the trailing axis.

    Training mode normalizes by batch statistics and (optionally) updates
    the moving statistics; inference mode uses the moving statistics and
    is independent of batch composition.
    """
    x, beta, gamma = as_tensor(x), as_tensor(beta), as_tensor(gamma)
    axes = tuple(range(x.ndim - 1))
    if training:
        if x.shape[0] < 2:
            raise ValueError(f"batch_norm training mode requires batch size >= 2, got {x.shape[0]}")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_stats:
            state.mean[...] = momentum * state.mean + (1.0 - momentum) * mu
            state.var[...] = momentum * state.var + (1.0 - momentum) * var
    else:
        mu = state.mean.astype(x.dtype)
        var = state.var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out_data = gamma.data * xhat + beta.data

    m = int(np.prod([x.shape[ax] for ax in axes]))

    def backward(out, g):
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=axes))
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=axes))
        if x.requires_grad:
            if training:
                dxhat = g * gamma.data
                t1 = dxhat.sum(axis=axes)
                t2 = (dxhat * xhat).sum(axis=axes)
                x.accumulate_grad(inv_std / m * (m * dxhat - t1 - xhat * t2))
            else:
                x.accumulate_grad(g * gamma.data * inv_std)

    return record_op(out_data, (x, beta, gamma), backward)


# ---------------------------------------------------------------------------
# pooling / gating / regularization
# ---------------------------------------------------------------------------

def global_avg_pool(x) -> Tensor:
    """NHWC -> (N, C) spatial mean."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NHWC, got {x.shape}")
    n, h, w, c = x.shape

    def backward(out, g):
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(g[:, None, None, :] / (h * w), x.shape))

    return record_op(x.data.mean(axis=(1, 2)), (x,), backward)


def scale_channels(x, gate) -> Tensor:
    """Multiply NHWC activations by per-(sample, channel) gates of shape (N, C)."""
    x, gate = as_tensor(x), as_tensor(gate)
    g4 = gate.data[:, None, None, :]

    def backward(out, g):
        if x.requires_grad:
            x.accumulate_grad(g * g4)
        if gate.requires_grad:
            gate.accumulate_grad((g * x.data).sum(axis=(1, 2)))

    return record_op(x.data * g4, (x, gate), backward)


def dropout(x, keep_prob: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; the mask comes from the caller's seeded generator."""
    x = as_tensor(x)
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must be in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    mask = (rng.random(x.shape) < keep_prob).astype(x.dtype) / keep_prob

    def backward(out, g):
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    return record_op(x.data * mask, (x,), backward)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (N, C) logits, got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must be in [0, {c}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    out_data = np.asarray((lse - z[rows, labels]).mean(), dtype=logits.dtype)

    def backward(out, g):
        if logits.requires_grad:
            p = np.exp(z - lse[:, None])
            p[rows, labels] -= 1.0
            logits.accumulate_grad(g * p / n)

    return record_op(out_data, (logits,), backward)


def sigmoid_bce(logits, targets) -> Tensor:
    """Mean binary cross-entropy on raw logits (numerically stable)."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=logits.dtype)
    x = logits.data
    out_data = np.asarray((np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))).mean(),
                          dtype=logits.dtype)

    def backward(out, g):
        if logits.requires_grad:
            p = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                         np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
            logits.accumulate_grad(g * (p - t) / x.size)

    return record_op(out_data, (logits,), backward)


# ---------------------------------------------------------------------------
# template mixing
# ---------------------------------------------------------------------------

def mix(weights, tensors: Sequence[Tensor]) -> Tensor:
    """Weighted sum ``sum_k weights[k] * tensors[k]`` over a template axis.

    With a one-hot weight vector the zero terms contribute exactly 0.0,
    so the result is bit-equal to the selected template.
    """
    weights = as_tensor(weights)
    tensors = [as_tensor(t) for t in tensors]
    k = len(tensors)
    if weights.shape != (k,):
        raise ShapeError(f"mix got {k} tensors but weight vector of shape {weights.shape}")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"mix requires identically shaped tensors, got {shape} and {t.shape}")
    stacked = np.stack([t.data for t in tensors])
    out_data = np.tensordot(weights.data, stacked, axes=1)

    def backward(out, g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t.accumulate_grad(weights.data[i] * g)
        if weights.requires_grad:
            weights.accumulate_grad(np.tensordot(stacked, g, axes=g.ndim))

    return record_op(out_data, (weights, *tensors), backward)
