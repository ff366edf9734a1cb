"""Dice and Jaccard overlap scores and their fold-level aggregation.

Two empty masks count as perfect agreement (score 1) so that folds in
which a rare attribute never occurs do not drag averages to zero.
"""

from __future__ import annotations

import csv
import io
import os
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import DataError, DimensionError
from .maskops import as_mask


def overlap_counts(pred, target) -> tuple[int, int, int]:
    """``(|A & B|, |A|, |B|)`` for two binary masks."""
    a, b = as_mask(pred), as_mask(target)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = int(np.count_nonzero(a & b))
    return inter, int(np.count_nonzero(a)), int(np.count_nonzero(b))


def dice(pred, target) -> float:
    inter, na, nb = overlap_counts(pred, target)
    if na + nb == 0:
        return 1.0
    return 2.0 * inter / (na + nb)


def jaccard(pred, target) -> float:
    inter, na, nb = overlap_counts(pred, target)
    union = na + nb - inter
    if union == 0:
        return 1.0
    return inter / union


@dataclass
class MetricRow:
    name: str
    jaccard_mean: float
    jaccard_std: float
    dice_mean: float
    dice_std: float


@dataclass
class MetricSummary:
    rows: list[MetricRow]
    fold_means: dict[str, list[tuple[float, float]]]  # attribute -> per-fold (dice, jaccard)

    def row(self, name: str) -> MetricRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["attribute", "jaccard_mean", "jaccard_std", "dice_mean", "dice_std"])
        for r in self.rows:
            w.writerow([r.name] + [f"{v:.6f}" for v in (r.jaccard_mean, r.jaccard_std, r.dice_mean, r.dice_std)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w", encoding="utf-8", newline="") as f:
            f.write(self.to_csv())
        os.replace(tmp, path)


def summarize(scores: Iterable[tuple[str, int, float, float]]) -> MetricSummary:
    """Aggregate ``(attribute, fold, dice, jaccard)`` per-sample records.

    Each fold is reduced to its mean; attribute rows report the mean and
    population standard deviation of those fold means. The ``Average`` row
    averages attributes with equal weight, fold by fold.
    """
    grouped: dict[str, dict[int, list[tuple[float, float]]]] = defaultdict(lambda: defaultdict(list))
    for attribute, fold, d, j in scores:
        grouped[attribute][fold].append((d, j))
    if not grouped:
        raise DataError("no scores to summarise")
    rows, fold_means = [], {}
    for attribute, folds in grouped.items():
        per_fold = []
        for fold in sorted(folds):
            vals = folds[fold]
            if not vals:
                raise DataError(f"empty fold {fold} for attribute {attribute}")
            per_fold.append((float(np.mean([v[0] for v in vals])), float(np.mean([v[1] for v in vals]))))
        fold_means[attribute] = per_fold
        d = np.array([v[0] for v in per_fold])
        j = np.array([v[1] for v in per_fold])
        rows.append(MetricRow(attribute, float(j.mean()), float(j.std()), float(d.mean()), float(d.std())))
    n_folds = {len(v) for v in fold_means.values()}
    if len(n_folds) == 1:
        d = np.mean([[v[0] for v in fm] for fm in fold_means.values()], axis=0)
        j = np.mean([[v[1] for v in fm] for fm in fold_means.values()], axis=0)
        rows.append(MetricRow("Average", float(j.mean()), float(j.std()), float(d.mean()), float(d.std())))
    else:
        rows.append(MetricRow("Average",
                              float(np.mean([r.jaccard_mean for r in rows])), float("nan"),
                              float(np.mean([r.dice_mean for r in rows])), float("nan")))
    return MetricSummary(rows, fold_means)
