"""Mini-batch training of the pair network with Adam."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import network, ops
from .dataset import PairSample, augment_pair
from .metrics import jaccard, precision
from .optim import adam_step
from .tensor import ParamStore

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass
class StepRecord:
    iteration: int
    loss: float
    val_jaccard: float | None = None


def stack_batch(samples: Sequence[PairSample]):
    iA = np.stack([s.image_a for s in samples]).astype(np.float32)
    iB = np.stack([s.image_b for s in samples]).astype(np.float32)
    mA = np.stack([s.mask_a for s in samples]).astype(np.int64)
    mB = np.stack([s.mask_b for s in samples]).astype(np.int64)
    return iA, iB, mA, mB


def batch_indices(n: int, batch: int, rng: np.random.Generator):
    """Endless stream of index batches drawn from reshuffled epochs."""
    order = rng.permutation(n)
    pos = 0
    while True:
        if pos + batch > n:
            order = rng.permutation(n)
            pos = 0
        yield order[pos : pos + batch]
        pos += batch


def train_step(params: ParamStore, cfg: network.NetworkConfig, batch: Sequence[PairSample], opt: dict) -> float:
    iA, iB, mA, mB = stack_batch(batch)
    params.zero_grad()
    loss = network.pair_loss(iA, iB, mA, mB, params, cfg)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss {value} at step {params.step + 1}")
    loss.backward()
    adam_step(params, params.grads(), **opt)
    return value


def pretrain_encoder(
    params: ParamStore,
    cfg: network.NetworkConfig,
    images: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    iterations: int,
    batch: int = 20,
    lr: float = 1e-3,
    weight_decay: float = 5e-4,
    seed: int = 0,
) -> list[float]:
    """Teach the encoder object identity before pair training.

    A temporary 1x1 classifier on the encoder features predicts the label at
    the centre of every feature cell; only the encoder weights are kept.
    ``images`` is ``(N, 3, H, W)`` and ``labels`` holds class ids ``(N, H, W)``.
    """
    rng = np.random.default_rng(seed)
    dtype = params["enc.conv1_1.w"].dtype
    enc = params.view(n for n in params if n.startswith("enc."))
    c = cfg.feature_channels
    head_w = rng.standard_normal((n_classes, c, 1, 1)) * np.sqrt(1.0 / c)
    enc.add("pretrain.head.w", head_w.astype(dtype))
    enc.add("pretrain.head.b", np.zeros(n_classes, dtype))
    stride = cfg.input_size // cfg.feature_size
    cells = labels[:, stride // 2 :: stride, stride // 2 :: stride].astype(np.int64)
    stream = batch_indices(len(images), min(batch, len(images)), rng)
    losses = []
    for it in range(1, iterations + 1):
        idx = next(stream)
        x = images[idx].astype(dtype)
        t = cells[idx]
        if rng.random() < 0.5:
            x, t = x[..., ::-1].copy(), t[..., ::-1].copy()
        enc.zero_grad()
        logits = ops.conv2d(network.encode(x, params, cfg), enc["pretrain.head.w"], enc["pretrain.head.b"])
        loss = ops.softmax_cross_entropy(logits, t)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(f"non-finite pretraining loss {value} at step {it}")
        loss.backward()
        adam_step(enc, enc.grads(), lr=lr, weight_decay=weight_decay)
        losses.append(value)
    return losses


def evaluate_pairs(params: ParamStore, cfg: network.NetworkConfig, samples: Sequence[PairSample], batch: int = 10, sigma: float = 0.5):
    """Mean precision (percent) and Jaccard over both sides of every pair."""
    ps, js = [], []
    for lo in range(0, len(samples), batch):
        iA, iB, mA, mB = stack_batch(samples[lo : lo + batch])
        _, _, predA, predB = network.predict_masks(iA, iB, params, cfg, sigma)
        for pred, gt in ((predA, mA), (predB, mB)):
            for p, g in zip(pred, gt):
                ps.append(precision(p, g))
                js.append(jaccard(p, g))
    return float(np.mean(ps)), float(np.mean(js))


def train(
    params: ParamStore,
    cfg: network.NetworkConfig,
    samples: Sequence[PairSample],
    iterations: int,
    batch_pairs: int = 10,
    lr: float = 1e-5,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 5e-4,
    seed: int = 0,
    augment: bool = True,
    val_samples: Sequence[PairSample] | None = None,
    eval_every: int = 0,
    on_step: Callable[[StepRecord, ParamStore], None] | None = None,
) -> list[StepRecord]:
    """Run ``iterations`` Adam steps over random mini-batches of pairs.

    The loss of a batch is the mean over its pairs of ``L_A + L_B``.
    """
    rng = np.random.default_rng(seed)
    opt = dict(lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
    stream = batch_indices(len(samples), min(batch_pairs, len(samples)), rng)
    history = []
    for it in range(1, iterations + 1):
        batch = [samples[i] for i in next(stream)]
        if augment:
            batch = [augment_pair(s, rng) for s in batch]
        rec = StepRecord(it, train_step(params, cfg, batch, opt))
        if val_samples and eval_every and it % eval_every == 0:
            rec.val_jaccard = evaluate_pairs(params, cfg, val_samples)[1]
            log.info("iter %d loss %.4f val J %.3f", it, rec.loss, rec.val_jaccard)
        history.append(rec)
        if on_step is not None:
            on_step(rec, params)
    return history
