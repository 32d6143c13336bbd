"""Differentiable tensor operations.

Every function takes and returns :class:`~lczlab.tensor.Tensor` objects.  When a
tape is active and an input requires a gradient, the operation records a
closure computing the vector-Jacobian product for each input.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    DataError,
    DegenerateVarianceError,
    DimensionError,
    NonFiniteError,
    ParameterError,
)
from .tensor import Tensor, active_tape

PROB_FLOOR = 1e-12


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values in forward output of shape {data.shape}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    tape = active_tape()
    out.requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, (a, b), backward)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product of two identically shaped tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"elementwise_mul needs identical shapes, got {a.shape} and {b.shape}")
    return mul(a, b)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.maximum(x.data, 0), (x,), lambda g: (g * mask,))


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, x.shape),)

    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} into {tuple(shape)}") from exc
    return _result(data, (x,), lambda g: (g.reshape(x.shape),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat along axis {axis}: shape {t.shape} incompatible with {ref}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            grads.append(g[tuple(idx)])
        return grads

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def take_channels(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather channels (axis 1) in the given order; indices must be distinct."""
    idx = np.asarray(indices, dtype=np.int64)
    if len(set(idx.tolist())) != len(idx) or idx.min(initial=0) < 0 or idx.max(initial=-1) >= x.shape[1]:
        raise DimensionError(f"take_channels: invalid indices {idx.tolist()} for input {x.shape}")

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, idx] = g
        return (gx,)

    return _result(np.ascontiguousarray(x.data[:, idx]), (x,), backward)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=1)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _result(a.data @ b.data, (a, b), backward)


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ weight + bias``; any leading dims."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"dense: input {x.shape} does not match weight {weight.shape}")
    d_in, d_out = weight.shape
    flat = x.data.reshape(-1, d_in)
    out = flat @ weight.data
    if bias is not None:
        out += bias.data
    out = out.reshape(x.shape[:-1] + (d_out,))

    def backward(g):
        g2 = g.reshape(-1, d_out)
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = flat.T @ g2
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, inputs, backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), backward)


# ---------------------------------------------------------------- convolution & pooling


def _same_pads(k: int) -> tuple[int, int]:
    lo = (k - 1) // 2
    return lo, k - 1 - lo


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: str = "same") -> Tensor:
    """2-D cross-correlation, stride 1.  ``x``: [N,C,H,W], ``kernel``: [F,C,k,k]."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d: input {x.shape} has {c} channels but kernel {kernel.shape} expects {kc}")
    if bias is not None and bias.shape != (f,):
        raise DimensionError(f"conv2d: bias {bias.shape} does not match kernel {kernel.shape}")
    if padding == "same":
        (pt, pb), (pl, pr) = _same_pads(kh), _same_pads(kw)
        xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if kh > 1 or kw > 1 else x.data
    elif padding == "valid":
        if kh > h or kw > w:
            raise DimensionError(f"conv2d valid padding: kernel {kernel.shape} larger than input {x.shape}")
        pt = pl = 0
        xp = x.data
    else:
        raise ParameterError(f"unknown padding mode {padding!r}")
    ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    # channels-last im2col: column block (i, j) holds the input shifted by (i, j)
    xl = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    offsets = [(i, j) for i in range(kh) for j in range(kw)]
    if len(offsets) == 1:
        cols = xl.reshape(n * ho * wo, c)
    else:
        cols = np.concatenate([xl[:, i : i + ho, j : j + wo, :] for i, j in offsets], axis=-1).reshape(
            n * ho * wo, kh * kw * c
        )
    wmat = np.ascontiguousarray(kernel.data.transpose(0, 2, 3, 1).reshape(f, -1))
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, f)
        gw = (g2.T @ cols).reshape(f, kh, kw, c).transpose(0, 3, 1, 2)
        gb = g2.sum(axis=0) if bias is not None else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, kh * kw * c)
            gxl = np.zeros(xl.shape, dtype=x.dtype)
            for s_, (i, j) in enumerate(offsets):
                gxl[:, i : i + ho, j : j + wo, :] += dcols[..., s_ * c : (s_ + 1) * c]
            gx = gxl[:, pt : pt + h, pl : pl + w, :].transpose(0, 3, 1, 2)
        return gx, gw, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, inputs, backward)


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling (stride = size); trailing rows/cols dropped."""
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise DimensionError(f"maxpool2d: input {x.shape} smaller than pool size {size}")
    blocks = (
        x.data[:, :, : ho * size, : wo * size]
        .reshape(n, c, ho, size, wo, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, size * size)
    )
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=x.dtype)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        gb = gb.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * size, wo * size)
        gx = np.zeros(x.shape, dtype=x.dtype)
        gx[:, :, : ho * size, : wo * size] = gb
        return (gx,)

    return _result(np.ascontiguousarray(out), (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C] spatial mean."""
    n, c, h, w = x.shape
    inv = 1.0 / (h * w)

    def backward(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], x.shape),)

    return _result(x.data.mean(axis=(2, 3)).astype(x.dtype, copy=False), (x,), backward)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------- normalisation & regularisation


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation over (N, H, W).

    In train mode ``running_mean``/``running_var`` are updated in place.
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm2d: affine shapes {gamma.shape}/{beta.shape} do not match input {x.shape}")
    shape = (1, c, 1, 1)
    if mode == "train":
        m = n * h * w
        if m < 2:
            raise DegenerateVarianceError(f"batchnorm2d in train mode needs N*H*W >= 2, got input {x.shape}")
        mu = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mu.reshape(shape)
        var = (centered * centered).mean(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1))
    elif mode == "infer":
        m = None
        centered = x.data - running_mean.reshape(shape).astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
    else:
        raise ParameterError(f"unknown batchnorm mode {mode!r}")
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
    xhat = centered * inv.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data.reshape(shape)
        if m is None:
            gx = dxhat * inv.reshape(shape)
        else:
            s1 = dxhat.sum(axis=(0, 2, 3)).reshape(shape)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
            gx = (inv.reshape(shape) / m) * (m * dxhat - s1 - xhat * s2)
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), backward)


def spatial_dropout(x: Tensor, rate: float, mode: str = "train", rng: np.random.Generator | None = None) -> Tensor:
    """Drops whole channels with probability ``rate``; survivors scaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return x
    if mode != "train":
        raise ParameterError(f"unknown dropout mode {mode!r}")
    if rng is None:
        raise ParameterError("spatial_dropout in train mode needs a seeded generator")
    n, c = x.shape[:2]
    keep = rng.random((n, c)) >= rate
    mask = (keep / (1.0 - rate)).astype(x.dtype).reshape((n, c) + (1,) * (x.ndim - 2))
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- attention


def multi_head_attention(query_src: Tensor, kv_src: Tensor, heads: int, params: dict) -> Tensor:
    """Scaled dot-product attention with ``heads`` heads.

    ``params`` maps ``wq, bq, wk, bk, wv, bv, wo, bo`` to square projection
    weights [D,D] and biases [D].  Self-attention is ``query_src is kv_src``.
    """
    n, lq, d = query_src.shape
    if kv_src.ndim != 3 or kv_src.shape[0] != n or kv_src.shape[2] != d:
        raise DimensionError(f"attention: query {query_src.shape} and key/value {kv_src.shape} incompatible")
    if heads < 1 or d % heads:
        raise ConfigurationError(f"embedding width {d} is not divisible by {heads} heads")
    lk = kv_src.shape[1]
    dh = d // heads

    def split(t, length):
        return permute(reshape(t, (n, length, heads, dh)), (0, 2, 1, 3))

    q = split(dense(query_src, params["wq"], params["bq"]), lq)
    k = split(dense(kv_src, params["wk"], params["bk"]), lk)
    v = split(dense(kv_src, params["wv"], params["bv"]), lk)
    scores = scale(matmul(q, permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    weights = softmax(scores, axis=-1)
    ctx = reshape(permute(matmul(weights, v), (0, 2, 1, 3)), (n, lq, d))
    return dense(ctx, params["wo"], params["bo"])


# ---------------------------------------------------------------- loss


def cross_entropy_loss(probs: Tensor, targets) -> Tensor:
    """Mean categorical cross entropy of probability rows against one-hot targets."""
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    if probs.ndim != 2 or t.shape != probs.shape:
        raise DimensionError(f"cross_entropy_loss: probs {probs.shape} vs targets {t.shape}")
    if not (np.isin(t, (0, 1)).all() and (t.sum(axis=1) == 1).all()):
        raise DataError("every target row must be one-hot")
    if np.abs(probs.data.sum(axis=1) - 1.0).max(initial=0.0) > 1e-4:
        raise DataError("probability rows must sum to 1 within 1e-4")
    n = probs.shape[0]
    cls = t.argmax(axis=1)
    p = probs.data[np.arange(n), cls]
    floored = np.maximum(p, PROB_FLOOR)
    loss = np.asarray(-np.log(floored).mean(), dtype=probs.dtype)

    def backward(g):
        gp = np.zeros_like(probs.data)
        gp[np.arange(n), cls] = np.where(p > PROB_FLOOR, -1.0 / (n * floored), 0.0) * g
        return (gp,)

    return _result(loss, (probs,), backward)


def one_hot(labels, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"labels outside 0..{num_classes - 1}")
    out = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def argmax_rows(probs) -> np.ndarray:
    """Row-wise argmax; exact ties resolve to the lowest index."""
    arr = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return arr.argmax(axis=-1)
