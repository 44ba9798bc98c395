"""Differentiable primitives: dense maps, layer norm, masked attention,
masked softmax, pooling, and categorical distribution helpers.

All operations work on trailing dimensions and accept an optional leading
batch axis. Gradients flow only into tensors with requires_grad set.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

MASK_FILL = -1e9  # stands in for -inf before softmax; exp underflows to 0.0
LAYER_NORM_EPS = 1e-6


def _track(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _reduce_to_shape(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(np.matmul(a.data, b.data), _track(a, b), (a, b))

    def backward(grad):
        if a.requires_grad:
            ga = np.matmul(grad, np.swapaxes(b.data, -1, -2))
            a.accumulate(_reduce_to_shape(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), grad)
            b.accumulate(_reduce_to_shape(gb, b.data.shape))

    out._backward = backward
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, _track(a, b), (a, b))

    def backward(grad):
        if a.requires_grad:
            a.accumulate(_reduce_to_shape(grad, a.data.shape))
        if b.requires_grad:
            b.accumulate(_reduce_to_shape(grad, b.data.shape))

    out._backward = backward
    return out


def residual_add(x: Tensor, y: Tensor) -> Tensor:
    return add(x, y)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, _track(a, b), (a, b))

    def backward(grad):
        if a.requires_grad:
            a.accumulate(_reduce_to_shape(grad * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_reduce_to_shape(grad * a.data, b.data.shape))

    out._backward = backward
    return out


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c, x.requires_grad, (x,))

    def backward(grad):
        if x.requires_grad:
            x.accumulate(grad * c)

    out._backward = backward
    return out


def mul_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Elementwise product with a non-differentiated array (e.g. a mask)."""
    out = Tensor(x.data * c, x.requires_grad, (x,))

    def backward(grad):
        if x.requires_grad:
            x.accumulate(_reduce_to_shape(grad * c, x.data.shape))

    out._backward = backward
    return out


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    out = Tensor(np.where(keep, x.data, 0.0), x.requires_grad, (x,))

    def backward(grad):
        if x.requires_grad:
            x.accumulate(grad * keep)

    out._backward = backward
    return out


def exp(x: Tensor) -> Tensor:
    val = np.exp(x.data)
    out = Tensor(val, x.requires_grad, (x,))

    def backward(grad):
        if x.requires_grad:
            x.accumulate(grad * val)

    out._backward = backward
    return out


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data), x.requires_grad, (x,))

    def backward(grad):
        if x.requires_grad:
            x.accumulate(grad / x.data)

    out._backward = backward
    return out


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with pass-through gradient on the closed interval."""
    out = Tensor(np.clip(x.data, lo, hi), x.requires_grad, (x,))
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(grad):
        if x.requires_grad:
            x.accumulate(grad * inside)

    out._backward = backward
    return out


def minimum(a: Tensor, b: Tensor) -> Tensor:
    take_a = a.data <= b.data
    out = Tensor(np.where(take_a, a.data, b.data), _track(a, b), (a, b))

    def backward(grad):
        if a.requires_grad:
            a.accumulate(_reduce_to_shape(grad * take_a, a.data.shape))
        if b.requires_grad:
            b.accumulate(_reduce_to_shape(grad * ~take_a, b.data.shape))

    out._backward = backward
    return out


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims), x.requires_grad, (x,))

    def backward(grad):
        if not x.requires_grad:
            return
        g = grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x.accumulate(np.broadcast_to(g, x.data.shape))

    out._backward = backward
    return out


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return scale(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def square(x: Tensor) -> Tensor:
    return mul(x, x)


def transpose_last(x: Tensor) -> Tensor:
    out = Tensor(np.swapaxes(x.data, -1, -2), x.requires_grad, (x,))

    def backward(grad):
        if x.requires_grad:
            x.accumulate(np.swapaxes(grad, -1, -2))

    out._backward = backward
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale."""
    d = x.data.shape[-1]
    mean = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data, _track(x, gain, bias), (x, gain, bias))

    def backward(grad):
        if gain.requires_grad:
            gain.accumulate(_reduce_to_shape(grad * xhat, gain.data.shape))
        if bias.requires_grad:
            bias.accumulate(_reduce_to_shape(grad, bias.data.shape))
        if x.requires_grad:
            dxhat = grad * gain.data
            dvar = (dxhat * xc).sum(axis=-1, keepdims=True) * (-0.5) * inv ** 3
            dmean = (-dxhat * inv).sum(axis=-1, keepdims=True) + dvar * (-2.0 / d) * xc.sum(
                axis=-1, keepdims=True)
            x.accumulate(dxhat * inv + dvar * (2.0 / d) * xc + dmean / d)

    out._backward = backward
    return out


def masked_softmax(logits: Tensor, valid: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to `valid` entries.

    Invalid entries get probability exactly 0. Rows with no valid entry
    come out all-zero (callers mask such rows out downstream)."""
    data = np.where(valid, logits.data, MASK_FILL)
    shifted = data - data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    e = np.where(valid, e, 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    probs = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)
    out = Tensor(probs, logits.requires_grad, (logits,))

    def backward(grad):
        if logits.requires_grad:
            inner = (grad * probs).sum(axis=-1, keepdims=True)
            logits.accumulate(probs * (grad - inner))

    out._backward = backward
    return out


def masked_attention(query: Tensor, key: Tensor, value: Tensor,
                     mask: np.ndarray) -> Tensor:
    """Scaled dot-product attention; mask[..., q, k] selects which keys each
    query may attend to. Fully masked query rows produce zero outputs."""
    d = query.data.shape[-1]
    scores = scale(matmul(query, transpose_last(key)), 1.0 / np.sqrt(d))
    probs = masked_softmax(scores, mask)
    return matmul(probs, value)


def sum_pool(x: Tensor, mask: np.ndarray) -> Tensor:
    """Sum rows (axis -2) where mask is true; masked rows contribute 0."""
    return reduce_sum(mul_const(x, mask[..., None].astype(x.data.dtype)), axis=-2)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along axis -2: out[..., i, :] = x[..., idx[..., i], :].
    Supports (C, d) with idx (N,) and (B, C, d) with idx (B, N)."""
    expanded = np.broadcast_to(idx[..., None], idx.shape + (x.data.shape[-1],))
    out = Tensor(np.take_along_axis(x.data, expanded, axis=-2), x.requires_grad, (x,))

    def backward(grad):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            if idx.ndim == 1:
                np.add.at(gx, idx, grad)
            else:
                batch = np.arange(idx.shape[0])[:, None]
                np.add.at(gx, (batch, idx), grad)
            x.accumulate(gx)

    out._backward = backward
    return out


def scatter_rows(base: Tensor, idx: np.ndarray, rows: Tensor,
                 write: np.ndarray) -> Tensor:
    """Copy of `base` with rows[..., i, :] written at slot idx[..., i] where
    write[..., i]; duplicate indices must not occur among written rows."""
    data = np.array(base.data, copy=True)
    if base.data.ndim == 2:
        sel = np.flatnonzero(write)
        data[idx[sel]] = rows.data[sel]
    else:
        b_idx, r_idx = np.nonzero(write)
        data[b_idx, idx[b_idx, r_idx]] = rows.data[b_idx, r_idx]
    out = Tensor(data, _track(base, rows), (base, rows))

    def backward(grad):
        if base.requires_grad:
            g = np.array(grad, copy=True)
            if base.data.ndim == 2:
                g[idx[np.flatnonzero(write)]] = 0.0
            else:
                b_idx, r_idx = np.nonzero(write)
                g[b_idx, idx[b_idx, r_idx]] = 0.0
            base.accumulate(g)
        if rows.requires_grad:
            gr = np.zeros_like(rows.data)
            if base.data.ndim == 2:
                sel = np.flatnonzero(write)
                gr[sel] = grad[idx[sel]]
            else:
                b_idx, r_idx = np.nonzero(write)
                gr[b_idx, r_idx] = grad[b_idx, idx[b_idx, r_idx]]
            rows.accumulate(gr)

    out._backward = backward
    return out


def gather_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """out[..., i] = x[..., i, idx[..., i]] along the last axis."""
    taken = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]
    out = Tensor(taken, x.requires_grad, (x,))

    def backward(grad):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.put_along_axis(gx, idx[..., None], grad[..., None], axis=-1)
            x.accumulate(gx)

    out._backward = backward
    return out


def entropy_rows(probs: Tensor) -> Tensor:
    """Shannon entropy of each probability row: -sum p ln p over p > 0."""
    p = probs.data
    support = p > 0
    logp = np.where(support, np.log(np.where(support, p, 1.0)), 0.0)
    out = Tensor(-(p * logp).sum(axis=-1), probs.requires_grad, (probs,))

    def backward(grad):
        if probs.requires_grad:
            probs.accumulate(np.where(support, -(logp + 1.0), 0.0) * grad[..., None])

    out._backward = backward
    return out


def categorical_sample(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw from one probability vector."""
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(probs) - 1))


def categorical_log_prob(probs: np.ndarray, action: int) -> float:
    p = probs[action]
    if p <= 0:
        raise ValueError("log-probability of a zero-probability action")
    return float(np.log(p))


def categorical_entropy(probs: np.ndarray) -> float:
    p = probs[probs > 0]
    return float(-(p * np.log(p)).sum())
