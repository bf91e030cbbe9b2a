"""Central finite-difference gradient checking in float64."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
    return float(np.max(np.abs(a - n) / denom))


def finite_diff_gradcheck(
    f: Callable[..., Tensor],
    inputs: np.ndarray | Sequence[np.ndarray],
    eps: float = 1e-3,
    seed: int = 0,
    wrt: Sequence[int] | None = None,
) -> float:
    """Compare autograd gradients of ``f`` against central differences.

    ``f`` takes one Tensor per input array and returns a Tensor. Non-scalar
    outputs are reduced with a fixed random cotangent so every output entry
    contributes. Returns the maximum, over all checked coordinates, of
    ``|a - n| / max(|a|, |n|, 1e-6)``.
    """
    if isinstance(inputs, np.ndarray):
        inputs = [inputs]
    xs = [np.array(x, dtype=np.float64) for x in inputs]
    wrt = range(len(xs)) if wrt is None else wrt

    probe = f(*[Tensor(x) for x in xs]).data
    cot = np.random.default_rng(seed).standard_normal(probe.shape)

    def scalar(arrays) -> float:
        return float(np.sum(f(*[Tensor(a) for a in arrays]).data * cot))

    leaves = [Tensor(x.copy(), requires_grad=(i in wrt)) for i, x in enumerate(xs)]
    out = f(*leaves)
    out.backward(cot.astype(out.dtype) if out.data.ndim else np.asarray(cot, dtype=out.dtype))

    worst = 0.0
    for i in wrt:
        x = xs[i]
        numeric = np.zeros_like(x)
        flat = x.reshape(-1)
        nflat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = scalar(xs)
            flat[j] = orig - eps
            down = scalar(xs)
            flat[j] = orig
            nflat[j] = (up - down) / (2 * eps)
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(x)
        worst = max(worst, max_relative_error(analytic, numeric))
    return worst
