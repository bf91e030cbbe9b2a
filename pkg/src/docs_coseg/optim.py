"""Adam with a classic L2 weight-decay term folded into the gradient."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .tensor import ParamStore


def adam_step(
    store: ParamStore,
    grads: Mapping[str, np.ndarray],
    lr: float = 1e-5,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> ParamStore:
    """Apply one bias-corrected Adam update in place and return the store."""
    missing = [name for name in store if name not in grads]
    if missing:
        raise KeyError(f"no gradient for parameter(s): {', '.join(missing)}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, param in store.items():
        w = param.data
        g = np.asarray(grads[name], dtype=w.dtype)
        if g.shape != w.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {w.shape}")
        if weight_decay:
            g = g + weight_decay * w
        m = store.m.get(name)
        if m is None:
            m = store.m[name] = np.zeros_like(w)
            store.v[name] = np.zeros_like(w)
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        w -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(w.dtype)
    return store
