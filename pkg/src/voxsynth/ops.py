"""Layer operations with hand-derived backward passes.

Each op computes its forward result eagerly and, when gradients are
enabled and some input requires them, attaches a closure that scatters the
output gradient back to the inputs. Reductions accumulate in float64
regardless of the working dtype.
"""

import numpy as np

from . import kernels
from .tensor import Tensor, grad_enabled, no_grad

__all__ = [
    "conv3d",
    "tconv3d",
    "instance_norm",
    "leaky_relu",
    "add",
    "concat_channels",
    "scale",
    "trilinear_upsample2x",
    "l1_loss",
    "softmax_cross_entropy",
    "softmax_channels",
    "OP_VERSIONS",
    "no_grad",
]

# Bumped when an op's arithmetic changes; recorded in checkpoints so stale
# parameter files are rejected instead of silently reinterpreted.
OP_VERSIONS = {
    "conv3d": 1,
    "tconv3d": 1,
    "instance_norm": 1,
    "leaky_relu": 1,
    "add": 1,
    "concat_channels": 1,
    "scale": 1,
    "trilinear_upsample2x": 1,
    "l1_loss": 1,
    "softmax_cross_entropy": 1,
}


def _attach(out, parents, backward):
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as_values(t):
    return t.values if isinstance(t, Tensor) else np.asarray(t)


def conv3d(x, weight, bias=None, stride=(1, 1, 1), padding=(0, 0, 0)):
    """Strided cross-correlation; output dim = floor((d + 2p - k)/s) + 1."""
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"channel mismatch: input has {x.shape[1]}, kernel expects {weight.shape[1]}"
        )
    bvals = bias.values if bias is not None else None
    out = Tensor(kernels.conv3d_forward(x.values, weight.values, bvals, stride, padding))

    def backward(gout):
        need_w = weight.requires_grad or (bias is not None and bias.requires_grad)
        gx, gw, gb = kernels.conv3d_backward(
            x.values, weight.values, stride, padding, gout,
            need_x=x.requires_grad, need_w=need_w,
        )
        if x.requires_grad:
            x.accumulate_grad(gx)
        if weight.requires_grad:
            weight.accumulate_grad(gw)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(gb)

    parents = [x, weight] if bias is None else [x, weight, bias]
    return _attach(out, parents, backward)


def tconv3d(x, weight, bias=None, stride=(1, 1, 1), padding=(0, 0, 0)):
    """Transposed convolution; output dim = (d - 1)*s - 2p + k."""
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"channel mismatch: input has {x.shape[1]}, kernel expects {weight.shape[1]}"
        )
    bvals = bias.values if bias is not None else None
    out = Tensor(kernels.tconv3d_forward(x.values, weight.values, bvals, stride, padding))

    def backward(gout):
        need_w = weight.requires_grad or (bias is not None and bias.requires_grad)
        gx, gw, gb = kernels.tconv3d_backward(
            x.values, weight.values, stride, padding, gout,
            need_x=x.requires_grad, need_w=need_w,
        )
        if x.requires_grad:
            x.accumulate_grad(gx)
        if weight.requires_grad:
            weight.accumulate_grad(gw)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(gb)

    parents = [x, weight] if bias is None else [x, weight, bias]
    return _attach(out, parents, backward)


def instance_norm(x, gamma, beta, eps=1e-5):
    """Standardize each (batch, channel) group over space, then affine."""
    v = x.values
    if v[0, 0].size < 2:
        raise ValueError("instance norm needs at least 2 voxels per channel")
    dt = v.dtype
    mu = v.mean(axis=(2, 3, 4), keepdims=True, dtype=np.float64)
    var = np.square(v.astype(np.float64) - mu).mean(axis=(2, 3, 4), keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(dt)
    mu = mu.astype(dt)
    xhat = (v - mu) * inv
    g = gamma.values.reshape(1, -1, 1, 1, 1)
    b = beta.values.reshape(1, -1, 1, 1, 1)
    out = Tensor(xhat * g + b)

    def backward(gout):
        n = v[0, 0].size
        if gamma.requires_grad:
            gamma.accumulate_grad(
                (gout * xhat).sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(dt)
            )
        if beta.requires_grad:
            beta.accumulate_grad(
                gout.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(dt)
            )
        if x.requires_grad:
            gh = gout * g
            s1 = gh.sum(axis=(2, 3, 4), keepdims=True, dtype=np.float64).astype(dt)
            s2 = (gh * xhat).sum(axis=(2, 3, 4), keepdims=True, dtype=np.float64).astype(dt)
            x.accumulate_grad(inv * (gh - (s1 + xhat * s2) / n))

    return _attach(out, [x, gamma, beta], backward)


def _dtype_scalar(arr, s):
    return arr.dtype.type(s)


def leaky_relu(x, slope=0.01):
    v = x.values
    out = Tensor(np.where(v >= 0, v, v * _dtype_scalar(v, slope)))

    def backward(gout):
        if x.requires_grad:
            x.accumulate_grad(np.where(v >= 0, gout, gout * _dtype_scalar(v, slope)))

    return _attach(out, [x], backward)


def add(a, b):
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.values + b.values)

    def backward(gout):
        if a.requires_grad:
            a.accumulate_grad(gout)
        if b.requires_grad:
            b.accumulate_grad(gout)

    return _attach(out, [a, b], backward)


def concat_channels(a, b):
    out = Tensor(np.concatenate([a.values, b.values], axis=1))
    na = a.shape[1]

    def backward(gout):
        if a.requires_grad:
            a.accumulate_grad(gout[:, :na])
        if b.requires_grad:
            b.accumulate_grad(gout[:, na:])

    return _attach(out, [a, b], backward)


def scale(x, s):
    s = float(s)
    out = Tensor(x.values * _dtype_scalar(x.values, s))

    def backward(gout):
        if x.requires_grad:
            x.accumulate_grad(gout * _dtype_scalar(x.values, s))

    return _attach(out, [x], backward)


_UPSAMPLE_MATS = {}


def _upsample_matrix(n, dt):
    """(2n, n) interpolation matrix, align_corners=False, clamped edges."""
    key = (int(n), np.dtype(dt).str)
    m = _UPSAMPLE_MATS.get(key)
    if m is None:
        md = np.zeros((2 * n, n), dtype=np.float64)
        for u in range(2 * n):
            c = (u + 0.5) / 2.0 - 0.5
            if c <= 0.0:
                md[u, 0] = 1.0
            elif c >= n - 1:
                md[u, n - 1] = 1.0
            else:
                i0 = int(np.floor(c))
                t = c - i0
                md[u, i0] = 1.0 - t
                md[u, i0 + 1] = t
        m = md.astype(dt)
        _UPSAMPLE_MATS[key] = m
    return m


def _apply_axis(arr, m, axis):
    out = np.tensordot(arr, m, axes=([axis], [1]))
    return np.ascontiguousarray(np.moveaxis(out, -1, axis))


def trilinear_upsample2x(x):
    """Double every spatial dim by trilinear interpolation.

    The backward pass multiplies by the transposed interpolation matrices,
    so it is the exact adjoint of the forward map.
    """
    v = x.values
    dt = v.dtype
    mats = [_upsample_matrix(v.shape[a], dt) for a in (2, 3, 4)]
    y = v
    for a, m in zip((2, 3, 4), mats):
        y = _apply_axis(y, m, a)
    out = Tensor(y)

    def backward(gout):
        if x.requires_grad:
            g = gout
            for a, m in zip((2, 3, 4), mats):
                g = _apply_axis(g, m.T, a)
            x.accumulate_grad(g)

    return _attach(out, [x], backward)


def l1_loss(pred, target):
    """Mean absolute difference as a scalar tensor; subgradient 0 at ties."""
    tv = _as_values(target)
    if pred.shape != tv.shape:
        raise ValueError(f"l1 shape mismatch: {pred.shape} vs {tv.shape}")
    d = pred.values - tv
    out = Tensor(np.float64(np.mean(np.abs(d), dtype=np.float64)))

    def backward(gout):
        if pred.requires_grad:
            g = np.sign(d) * (float(gout) / d.size)
            pred.accumulate_grad(g.astype(pred.values.dtype))

    parents = [pred, target] if isinstance(target, Tensor) else [pred]
    return _attach(out, parents, backward)


def _softmax(values):
    m = values.max(axis=1, keepdims=True)
    e = np.exp(values - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels(values):
    """Channel-axis softmax of a raw (B, C, z, y, x) array (no autodiff)."""
    return _softmax(np.asarray(values))


def softmax_cross_entropy(logits, labels):
    """Mean voxelwise cross-entropy between channel logits and int labels."""
    lv = logits.values
    lab = np.asarray(labels)
    if lab.shape != (lv.shape[0],) + lv.shape[2:]:
        raise ValueError(f"label shape {lab.shape} does not match logits {lv.shape}")
    p = _softmax(lv)
    idx = np.expand_dims(lab.astype(np.int64), 1)
    picked = np.take_along_axis(p, idx, axis=1)
    n = lab.size
    out = Tensor(np.float64(-np.mean(np.log(np.maximum(picked, 1e-30)), dtype=np.float64)))

    def backward(gout):
        if logits.requires_grad:
            g = p.copy()
            np.put_along_axis(g, idx, np.take_along_axis(g, idx, axis=1) - 1.0, axis=1)
            logits.accumulate_grad((g * (float(gout) / n)).astype(lv.dtype))

    return _attach(out, [logits], backward)
