"""Co-segmentation of an image group by pairing and per-pixel medians."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import network


def pair_plan(n_images: int, strategy="all", seed: int = 0) -> list[tuple[int, int]]:
    """Ordered ``(image, partner)`` pairings.

    ``strategy`` is ``"all"`` (every other image is a partner) or an integer
    ``k``: each image gets ``k`` distinct partners drawn with ``seed``.
    """
    if n_images < 2:
        raise ValueError(f"a group needs at least 2 images, got {n_images}")
    if strategy == "all" or strategy == n_images - 1:
        return [(n, m) for n in range(n_images) for m in range(n_images) if m != n]
    k = int(strategy)
    if not 1 <= k <= n_images - 1:
        raise ValueError(f"k must be in [1, {n_images - 1}], got {k}")
    rng = np.random.default_rng(seed)
    plan = []
    for n in range(n_images):
        others = np.array([m for m in range(n_images) if m != n])
        for m in np.sort(rng.choice(others, size=k, replace=False)):
            plan.append((n, int(m)))
    return plan


def median_map(prob_maps: Sequence[np.ndarray]) -> np.ndarray:
    """Per-pixel median; an even count averages the two central values."""
    if len(prob_maps) == 0:
        raise ValueError("need at least one probability map")
    shape = np.shape(prob_maps[0])
    for m in prob_maps:
        if np.shape(m) != shape:
            raise ValueError(f"probability maps differ in shape: {shape} vs {np.shape(m)}")
    return np.median(np.stack(prob_maps), axis=0)


def aggregate_median(prob_maps: Sequence[np.ndarray], sigma: float = 0.5) -> np.ndarray:
    """Foreground where the median foreground probability strictly exceeds sigma."""
    return (median_map(prob_maps) > sigma).astype(np.uint8)


@dataclass
class GroupResult:
    prob_maps: list[list[np.ndarray]]
    partners: list[list[int]]
    masks: list[np.ndarray] = field(default_factory=list)
    plan: list[tuple[int, int]] = field(default_factory=list)


def run_group(
    images: Sequence[np.ndarray],
    params,
    cfg: network.NetworkConfig,
    strategy="all",
    sigma: float = 0.5,
    seed: int = 0,
    batch: int = 1,
) -> GroupResult:
    """Pair every image per the plan and fuse its own-side maps by median.

    Each ordered pairing (n, m) is one forward pass whose A-side map joins
    image n's pool; the B-side output is discarded. ``batch=1`` keeps every
    pass bit-identical to a standalone :func:`network.forward_pair` call.
    """
    plan = pair_plan(len(images), strategy, seed)
    res = GroupResult([[] for _ in images], [[] for _ in images], plan=plan)
    for lo in range(0, len(plan), batch):
        chunk = plan[lo : lo + batch]
        iA = np.stack([images[n] for n, _ in chunk]).astype(np.float32)
        iB = np.stack([images[m] for _, m in chunk]).astype(np.float32)
        with params.frozen():
            pA, _ = network.forward_pair(iA, iB, params, cfg)
        for (n, m), prob in zip(chunk, pA.data[:, 1]):
            res.prob_maps[n].append(prob)
            res.partners[n].append(m)
    res.masks = [aggregate_median(maps, sigma) for maps in res.prob_maps]
    return res
