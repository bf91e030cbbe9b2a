"""Precision / Jaccard for binary masks and manifest-level reports."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def _pair(pred, gt):
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: prediction {p.shape}, ground truth {g.shape}")
    return p, g


def precision(pred, gt) -> float:
    """Percentage of pixels, foreground and background alike, labelled correctly."""
    p, g = _pair(pred, gt)
    return 100.0 * np.count_nonzero(p == g) / p.size


def jaccard(pred, gt) -> float:
    """Foreground intersection over union; two empty masks score 1."""
    p, g = _pair(pred, gt)
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


@dataclass
class ItemScore:
    item: str
    group: str
    precision: float
    jaccard: float


@dataclass
class EvalReport:
    items: list[ItemScore] = field(default_factory=list)
    n_pairs: int = 0

    @property
    def n_images(self) -> int:
        return len(self.items)

    def group_means(self) -> dict[str, tuple[float, float]]:
        acc = defaultdict(list)
        for it in self.items:
            acc[it.group].append(it)
        return {
            g: (float(np.mean([i.precision for i in its])), float(np.mean([i.jaccard for i in its])))
            for g, its in sorted(acc.items())
        }

    def mean(self) -> tuple[float, float]:
        if not self.items:
            return float("nan"), float("nan")
        return (
            float(np.mean([i.precision for i in self.items])),
            float(np.mean([i.jaccard for i in self.items])),
        )

    def to_tsv(self) -> str:
        lines = [f"{it.item}\t{it.precision:.4f}\t{it.jaccard:.6f}" for it in self.items]
        return "\n".join(lines) + ("\n" if lines else "")

    def to_table(self) -> str:
        p, j = self.mean()
        out = [
            f"# pairs evaluated: {self.n_pairs}; pair-sides: {self.n_images}",
            "# means are arithmetic over pair-sides (each side of each pair counts once)",
            f"{'group':<16}{'P (%)':>10}{'J':>10}",
        ]
        for g, (gp, gj) in self.group_means().items():
            out.append(f"{g:<16}{gp:>10.2f}{gj:>10.3f}")
        out.append(f"{'overall':<16}{p:>10.2f}{j:>10.3f}")
        return "\n".join(out) + "\n"


def evaluate_manifest(pred_dir, manifest, data_dir=None) -> EvalReport:
    """Score predicted masks against the manifest's ground truth.

    Predictions are looked up as ``<pred_dir>/<idA>__<idB>_A.png`` and
    ``..._B.png``. Ground truth comes from the record's in-memory masks, or
    from ``data_dir`` joined with the manifest mask paths.
    """
    from .dataset import load_mask

    pred_dir = Path(pred_dir)
    report = EvalReport()
    for rec in manifest.records:
        group = ",".join(str(c) for c in sorted(rec.common_classes))
        for side, gt, gt_path in (("A", rec.mask_a, rec.mask_a_path), ("B", rec.mask_b, rec.mask_b_path)):
            pred_path = pred_dir / f"{rec.key}_{side}.png"
            if not pred_path.exists():
                raise FileNotFoundError(f"missing prediction for record {rec.key} side {side}: {pred_path}")
            if gt is None:
                gt = load_mask(Path(data_dir) / gt_path)
            pred = load_mask(pred_path)
            report.items.append(ItemScore(f"{rec.key}_{side}", group, precision(pred, gt), jaccard(pred, gt)))
        report.n_pairs += 1
    return report
