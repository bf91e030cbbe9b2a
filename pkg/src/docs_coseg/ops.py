"""Differentiable operations on rank-4 NCHW tensors.

Each public op takes :class:`Tensor` arguments and returns a new Tensor whose
backward hook routes gradients to whichever parents require them. The raw
array kernels (``*_forward`` / ``*_backward``) are exposed too so that tests
and benchmarks can call them without building a graph.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .tensor import Tensor

LOG_CLAMP = 1e-7


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _out_dim(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _check_conv_args(x_shape, w_shape, stride, pad, in_axis=1):
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise ShapeError(f"conv expects rank-4 input and weight, got {x_shape} and {w_shape}")
    if x_shape[1] != w_shape[in_axis]:
        raise ShapeError(f"channel mismatch: input {x_shape} vs weight {w_shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"need stride >= 1 and pad >= 0, got stride={stride} pad={pad}")


# ---------------------------------------------------------------------------
# im2col helpers


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Unfold ``x`` into a ``(C*kh*kw, N*Ho*Wo)`` patch matrix.

    Rows are ordered (channel, kernel row, kernel column) to match
    ``weight.reshape(out, -1)``; columns are ordered (n, ho, wo).
    """
    n, c, h, w = x.shape
    ho = _out_dim(h, kh, stride, pad)
    wo = _out_dim(w, kw, stride, pad)
    return _kernels.im2col(np.ascontiguousarray(x), kh, kw, stride, pad, ho, wo)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch columns back onto an image."""
    n, c, h, w = x_shape
    ho = _out_dim(h, kh, stride, pad)
    wo = _out_dim(w, kw, stride, pad)
    return _kernels.col2im(np.ascontiguousarray(cols), n, c, h, w, kh, kw, stride, pad, ho, wo)


def _cm_to_nchw(m: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    """``(C, N*H*W)`` channel-major matrix to an NCHW array."""
    return np.ascontiguousarray(m.reshape(-1, n, h, w).transpose(1, 0, 2, 3))


def _nchw_to_cm(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    if n == 1:
        return x.reshape(c, h * w)
    return x.transpose(1, 0, 2, 3).reshape(c, n * h * w)


# ---------------------------------------------------------------------------
# convolution kernels

# patch matrices above this many entries are built band by band when no
# backward pass will need them
_BAND_LIMIT = 1 << 24


def conv2d_forward(x, weight, bias, stride=1, pad=0, keep_cols=True):
    """Returns ``(out, cols)``; ``cols`` is cached for the backward pass.

    With ``keep_cols=False`` large inputs are processed in bands of output
    rows and ``cols`` is returned as ``None``.
    """
    _check_conv_args(x.shape, weight.shape, stride, pad)
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    ho, wo = _out_dim(h, kh, stride, pad), _out_dim(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {weight.shape} larger than padded input {x.shape}")
    wmat = weight.reshape(o, -1)
    if not keep_cols and c * kh * kw * n * ho * wo > _BAND_LIMIT:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        out = np.empty((n, o, ho, wo), dtype=np.result_type(x, weight))
        band = max(1, _BAND_LIMIT // (c * kh * kw * n * wo))
        for r0 in range(0, ho, band):
            r1 = min(ho, r0 + band)
            part = xp[:, :, r0 * stride : (r1 - 1) * stride + kh]
            out[:, :, r0:r1] = _cm_to_nchw(wmat @ im2col(part, kh, kw, stride, 0), n, r1 - r0, wo)
        if bias is not None:
            out += bias.reshape(1, -1, 1, 1)
        return out, None
    cols = im2col(x, kh, kw, stride, pad)
    m = wmat @ cols
    if bias is not None:
        m += bias[:, None]
    return _cm_to_nchw(m, n, ho, wo), cols


def conv2d_backward(gout, x_shape, weight, cols, stride=1, pad=0, need_x=True):
    """Gradients ``(dx, dw, db)`` of conv2d given the upstream gradient."""
    o, _, kh, kw = weight.shape
    g = _nchw_to_cm(gout)
    dw = (g @ cols.T).reshape(weight.shape)
    db = g.sum(axis=1)
    dx = None
    if need_x:
        dx = col2im(weight.reshape(o, -1).T @ g, x_shape, kh, kw, stride, pad)
    return dx, dw, db


def conv2d_direct(x, weight, bias, stride=1, pad=0):
    """Reference convolution: one contraction per kernel tap, no unfolding."""
    _check_conv_args(x.shape, weight.shape, stride, pad)
    n, _, h, w = x.shape
    o, _, kh, kw = weight.shape
    ho, wo = _out_dim(h, kh, stride, pad), _out_dim(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, o, ho, wo), dtype=np.result_type(x, weight))
    for u in range(kh):
        for v in range(kw):
            patch = xp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride]
            out += np.einsum("nchw,oc->nohw", patch, weight[:, :, u, v])
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1)
    return out


def transposed_conv2d_forward(x, weight, bias, stride=2, pad=1):
    """Transposed convolution; ``weight`` is ``(in_channels, out_channels, kh, kw)``.

    This is exactly the input-gradient map of a conv2d with the same weight.
    """
    _check_conv_args(x.shape, weight.shape, stride, pad, in_axis=0)
    n, c, h, w = x.shape
    _, o, kh, kw = weight.shape
    hy = (h - 1) * stride - 2 * pad + kh
    wy = (w - 1) * stride - 2 * pad + kw
    if hy < 1 or wy < 1:
        raise ShapeError(f"transposed conv output would be empty for input {x.shape}, weight {weight.shape}")
    cols = weight.reshape(c, -1).T @ _nchw_to_cm(x)
    out = col2im(cols, (n, o, hy, wy), kh, kw, stride, pad)
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1)
    return out


def transposed_conv2d_backward(gout, x, weight, stride=2, pad=1, need_x=True):
    c, o, kh, kw = weight.shape
    cols = im2col(gout, kh, kw, stride, pad)
    xm = _nchw_to_cm(x)
    dw = (xm @ cols.T).reshape(weight.shape)
    db = gout.sum(axis=(0, 2, 3))
    dx = None
    if need_x:
        n, _, h, w = x.shape
        dx = _cm_to_nchw(weight.reshape(c, -1) @ cols, n, h, w)
    return dx, dw, db


# ---------------------------------------------------------------------------
# graph ops


def _needs(*ts: Tensor) -> bool:
    return any(t is not None and t.requires_grad for t in ts)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    parents = [p for p in (x, weight, bias) if p is not None]
    need = _needs(*parents)
    out, cols = conv2d_forward(x.data, weight.data, None if bias is None else bias.data, stride, pad, keep_cols=need)
    if not need:
        return Tensor(out)

    def backward(g):
        dx, dw, db = conv2d_backward(g, x.data.shape, weight.data, cols, stride, pad, need_x=x.requires_grad)
        if x.requires_grad:
            x.accumulate(dx)
        if weight.requires_grad:
            weight.accumulate(dw)
        if bias is not None and bias.requires_grad:
            bias.accumulate(db)

    return Tensor(out, True, parents, backward)


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2, pad: int = 1) -> Tensor:
    out = transposed_conv2d_forward(x.data, weight.data, None if bias is None else bias.data, stride, pad)
    parents = [p for p in (x, weight, bias) if p is not None]
    if not _needs(*parents):
        return Tensor(out)

    def backward(g):
        dx, dw, db = transposed_conv2d_backward(g, x.data, weight.data, stride, pad, need_x=x.requires_grad)
        if x.requires_grad:
            x.accumulate(dx)
        if weight.requires_grad:
            weight.accumulate(dw)
        if bias is not None and bias.requires_grad:
            bias.accumulate(db)

    return Tensor(out, True, parents, backward)


def maxpool2d_forward(x: np.ndarray, k: int = 2, stride: int = 2):
    """Returns ``(out, argmax)``; argmax is the flat in-window index of the first maximum."""
    n, c, h, w = x.shape
    if h % stride or w % stride:
        raise ShapeError(f"maxpool stride {stride} does not divide spatial dims of {x.shape}")
    ho, wo = _out_dim(h, k, stride, 0), _out_dim(w, k, stride, 0)
    return _kernels.maxpool_forward(np.ascontiguousarray(x), k, stride, ho, wo)


def maxpool2d_backward(g: np.ndarray, x_shape, idx: np.ndarray, k: int = 2, stride: int = 2) -> np.ndarray:
    return _kernels.maxpool_backward(np.ascontiguousarray(g), idx, k, stride, x_shape[2], x_shape[3])


def maxpool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    out, idx = maxpool2d_forward(x.data, k, stride)
    if not x.requires_grad:
        return Tensor(out)

    def backward(g):
        x.accumulate(maxpool2d_backward(g, x.data.shape, idx, k, stride))

    return Tensor(out, True, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = x.data * mask
    if not x.requires_grad:
        return Tensor(out)

    def backward(g):
        x.accumulate(g * mask)

    return Tensor(out, True, (x,), backward)


def softmax_forward(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels(x: Tensor) -> Tensor:
    if x.data.ndim != 4 or x.data.shape[1] < 2:
        raise ShapeError(f"softmax over channels needs >= 2 channels, got {x.shape}")
    p = softmax_forward(x.data)
    if not x.requires_grad:
        return Tensor(p)

    def backward(g):
        x.accumulate(p * (g - (g * p).sum(axis=1, keepdims=True)))

    return Tensor(p, True, (x,), backward)


def concat_channels(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("concat_channels needs at least one tensor")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ShapeError(f"cannot concat {ref} with {p.shape}: batch/spatial dims differ")
    out = np.concatenate([p.data for p in parts], axis=1)
    if not _needs(*parts):
        return Tensor(out)
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate(g[:, lo:hi])

    return Tensor(out, True, parts, backward)


def split_channels(x: np.ndarray, sizes: list[int]) -> list[np.ndarray]:
    return np.split(x, np.cumsum(sizes)[:-1], axis=1)


def _check_target(shape, target):
    if target.ndim == 2:
        target = target[None]
    if target.shape != (shape[0],) + tuple(shape[2:]):
        raise ShapeError(f"target {target.shape} does not match probability map {shape}")
    return target.astype(np.int64)


def cross_entropy_loss(p: np.ndarray, target: np.ndarray) -> float:
    """Mean per-pixel negative log-likelihood of 2-channel probabilities."""
    t = _check_target(p.shape, np.asarray(target))
    pt = np.take_along_axis(p, t[:, None], axis=1)[:, 0]
    return float(-np.log(np.clip(pt, LOG_CLAMP, 1 - LOG_CLAMP)).mean())


def softmax_cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Softmax over channels followed by the clamped cross-entropy.

    The backward pass uses the fused ``(p - onehot) / count`` gradient with
    respect to the logits.
    """
    t = _check_target(logits.shape, np.asarray(target))
    p = softmax_forward(logits.data)
    pt = np.take_along_axis(p, t[:, None], axis=1)[:, 0]
    loss = -np.log(np.clip(pt, LOG_CLAMP, 1 - LOG_CLAMP)).mean()
    out = np.asarray(loss, dtype=logits.dtype)
    if not logits.requires_grad:
        return Tensor(out)
    count = t.size

    def backward(g):
        d = p.copy()
        np.put_along_axis(d, t[:, None], np.take_along_axis(d, t[:, None], axis=1) - 1, axis=1)
        logits.accumulate(d * (g / count))

    return Tensor(out, True, (logits,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    if not _needs(a, b):
        return Tensor(out)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    return Tensor(out, True, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * s
    if not a.requires_grad:
        return Tensor(out)

    def backward(g):
        a.accumulate(g * s)

    return Tensor(out, True, (a,), backward)
