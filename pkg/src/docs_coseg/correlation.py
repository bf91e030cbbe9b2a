"""Mutual correlation between two feature maps.

For every position ``(i, j)`` of ``fA`` and every displacement ``(dy, dx)``
in a ``D x D`` window, the output channel ``k`` holds the inner product of
``fA[:, i, j]`` with ``fB[:, i + dy, j + dx]``. Displacements that land
outside ``fB`` contribute zero. Channel ``k`` encodes the displacement as
``k = (dy + R) * D + (dx + R)`` with ``R = (D - 1) // 2``.

The fast path computes the full position-by-position Gram matrix with one
batched matmul and scatters it into displacement channels; the naive path is
plain loops and is kept as a reference and benchmark baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .ops import ShapeError
from .tensor import Tensor

# incremented on every forward call; lets tests assert the layer was (not) used
CALL_COUNT = 0


def patch_size_for(w: int, h: int) -> int:
    """Smallest odd window covering every displacement between two w x h maps."""
    if w < 1 or h < 1:
        raise ValueError(f"feature map dims must be positive, got w={w} h={h}")
    return 2 * max(w - 1, h - 1) + 1


def offset_to_index(dy: int, dx: int, D: int) -> int:
    r = (D - 1) // 2
    if abs(dy) > r or abs(dx) > r:
        raise ValueError(f"offset ({dy}, {dx}) outside window of size {D}")
    return (dy + r) * D + (dx + r)


def index_to_offset(k: int, D: int) -> tuple[int, int]:
    if not 0 <= k < D * D:
        raise ValueError(f"channel {k} outside [0, {D * D})")
    r = (D - 1) // 2
    q, rem = divmod(k, D)
    return q - r, rem - r


@dataclass
class CorrelationMap:
    data: np.ndarray  # (n, D*D, h, w)
    D: int
    source_shape: tuple[int, int, int]  # (c, h, w)

    @property
    def shape(self):
        return self.data.shape


def _check(fA: np.ndarray, fB: np.ndarray, D: int) -> None:
    if fA.ndim != 4 or fA.shape != fB.shape:
        raise ShapeError(f"correlation needs equal rank-4 feature maps, got {fA.shape} and {fB.shape}")
    if D < 1 or D % 2 == 0:
        raise ValueError(f"patch size D must be a positive odd integer, got {D}")


@lru_cache(maxsize=32)
def _scatter_index(h: int, w: int, D: int):
    """Index arrays mapping Gram entries (p, q) to correlation entries (k, p).

    Only pairs whose displacement fits inside the window are kept.
    """
    r = (D - 1) // 2
    ii, jj = np.divmod(np.arange(h * w), w)
    dy = ii[None, :] - ii[:, None]  # rows: p (position in A), cols: q (position in B)
    dx = jj[None, :] - jj[:, None]
    ok = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    p_idx, q_idx = np.nonzero(ok)
    k_idx = (dy[ok] + r) * D + (dx[ok] + r)
    return p_idx, q_idx, k_idx


def correlate_forward(fA: np.ndarray, fB: np.ndarray, D: int) -> np.ndarray:
    _check(fA, fB, D)
    n, c, h, w = fA.shape
    a = fA.reshape(n, c, h * w)
    b = fB.reshape(n, c, h * w)
    gram = np.matmul(a.transpose(0, 2, 1), b)  # (n, hw, hw)
    p_idx, q_idx, k_idx = _scatter_index(h, w, D)
    out = np.zeros((n, D * D, h * w), dtype=gram.dtype)
    out[:, k_idx, p_idx] = gram[:, p_idx, q_idx]
    return out.reshape(n, D * D, h, w)


def correlate_backward(gC: np.ndarray, fA: np.ndarray, fB: np.ndarray, D: int):
    _check(fA, fB, D)
    n, c, h, w = fA.shape
    if gC.shape != (n, D * D, h, w):
        raise ShapeError(f"gradient {gC.shape} does not match correlation of {fA.shape} with D={D}")
    p_idx, q_idx, k_idx = _scatter_index(h, w, D)
    ggram = np.zeros((n, h * w, h * w), dtype=gC.dtype)
    ggram[:, p_idx, q_idx] = gC.reshape(n, D * D, h * w)[:, k_idx, p_idx]
    a = fA.reshape(n, c, h * w)
    b = fB.reshape(n, c, h * w)
    gA = np.matmul(b, ggram.transpose(0, 2, 1)).reshape(fA.shape)
    gB = np.matmul(a, ggram).reshape(fB.shape)
    return gA, gB


def correlate_naive(fA: np.ndarray, fB: np.ndarray, D: int) -> np.ndarray:
    """Loop reference: batch, row, column, displacement row/column, channel."""
    _check(fA, fB, D)
    n, c, h, w = fA.shape
    r = (D - 1) // 2
    out = np.zeros((n, D * D, h, w), dtype=np.result_type(fA, fB))
    for b in range(n):
        for i in range(h):
            for j in range(w):
                va = fA[b, :, i, j]
                for dy in range(-r, r + 1):
                    m = i + dy
                    if m < 0 or m >= h:
                        continue
                    for dx in range(-r, r + 1):
                        q = j + dx
                        if q < 0 or q >= w:
                            continue
                        out[b, (dy + r) * D + dx + r, i, j] = np.dot(va, fB[b, :, m, q])
    return out


def _l2_normalize(f: np.ndarray, eps: float = 1e-6):
    norm = np.sqrt((f * f).sum(axis=1, keepdims=True) + eps * eps)
    return f / norm, norm


def _l2_normalize_backward(g: np.ndarray, fhat: np.ndarray, norm: np.ndarray) -> np.ndarray:
    return (g - fhat * (g * fhat).sum(axis=1, keepdims=True)) / norm


def mutual_correlate(fA: Tensor, fB: Tensor, D: int, normalize: bool = False) -> Tensor:
    """Differentiable correlation layer; returns a Tensor of shape (n, D*D, h, w).

    With ``normalize=True`` the feature vectors are L2-normalised over
    channels first, turning raw inner products into cosine similarities.
    """
    global CALL_COUNT
    CALL_COUNT += 1
    a, b = fA.data, fB.data
    if normalize:
        _check(a, b, D)
        a, na = _l2_normalize(a)
        b, nb = _l2_normalize(b)
    out = correlate_forward(a, b, D)
    if not (fA.requires_grad or fB.requires_grad):
        return Tensor(out)

    def backward(g):
        gA, gB = correlate_backward(g, a, b, D)
        if normalize:
            gA = _l2_normalize_backward(gA, a, na)
            gB = _l2_normalize_backward(gB, b, nb)
        if fA.requires_grad:
            fA.accumulate(gA)
        if fB.requires_grad:
            fB.accumulate(gB)

    return Tensor(out, True, (fA, fB), backward)


def correlation_map(fA: np.ndarray, fB: np.ndarray, D: int | None = None) -> CorrelationMap:
    """Array-level forward returning a :class:`CorrelationMap`."""
    n, c, h, w = fA.shape
    if D is None:
        D = patch_size_for(w, h)
    return CorrelationMap(correlate_forward(fA, fB, D), D, (c, h, w))


def mutual_correlate_backward(grad: CorrelationMap | np.ndarray, fA: np.ndarray, fB: np.ndarray, D: int | None = None):
    """Gradients with respect to both feature maps for an upstream gradient."""
    if isinstance(grad, CorrelationMap):
        D, grad = grad.D, grad.data
    if D is None:
        raise ValueError("patch size D is required when passing a raw gradient array")
    return correlate_backward(grad, fA, fB, D)
