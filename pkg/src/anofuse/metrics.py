"""Exact ranking metrics and the evaluation report container.

auroc is the Mann-Whitney statistic (ties half-credited) computed through
midranks; average_precision sweeps thresholds downward with tied scores
collapsed into one step. Both are exact: every intermediate is a ratio of
small integers (or an integer multiple of one half), so results agree
bit-for-bit with brute-force pair counting and exhaustive sweeps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UndefinedMetricError


def _check_binary(labels):
    labels = np.asarray(labels)
    if labels.size == 0 or not np.isin(labels, (0, 1)).all():
        raise UndefinedMetricError("labels must be 0/1 and non-empty")
    return labels.astype(np.int64)


def auroc(scores, labels):
    """P(score_pos > score_neg) + 0.5 * P(tie), exactly."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_binary(labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"auroc needs both classes, got {n_pos} positives / {n_neg} negatives")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(labels.size, dtype=np.float64)
    i = 0
    while i < labels.size:
        j = i
        while j + 1 < labels.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * ((i + 1) + (j + 1))  # midrank, 1-based
        i = j + 1
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def average_precision(scores, labels):
    """Precision-weighted recall increments over a descending-score sweep."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_binary(labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    ap = 0.0
    tp = 0
    seen = 0
    i = 0
    while i < labels.size:
        j = i
        while j + 1 < labels.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        group_tp = int(sorted_labels[i:j + 1].sum())
        tp += group_tp
        seen = j + 1
        if group_tp:
            ap += (group_tp / n_pos) * (tp / seen)
        i = j + 1
    return ap


def gate_entropy(weights):
    """Mean entropy of fusion weight rows, in nats."""
    w = np.asarray(weights, dtype=np.float64)
    w = np.clip(w, 1e-300, 1.0)
    return float(-(w * np.log(w)).sum(axis=-1).mean())


@dataclass
class MetricsReport:
    pixel_auroc: float
    pixel_ap: float
    image_auroc: float
    image_ap: float
    n_images: int
    n_pixels: int
    n_anomalous_images: int
    n_anomalous_pixels: int
    config_echo: list = field(default_factory=list)
    level_entropy: dict = field(default_factory=dict)  # (level, state) -> mean nats

    def metric_values(self):
        return {"pixel_auroc": self.pixel_auroc, "pixel_ap": self.pixel_ap,
                "image_auroc": self.image_auroc, "image_ap": self.image_ap}

    def csv_lines(self):
        """Header + one row; metric values to 4 decimals, counts exact."""
        entropy_cols = [f"entropy_l{i}_{s}" for (i, s) in sorted(self.level_entropy)]
        header = ["pixel_auroc", "pixel_ap", "image_auroc", "image_ap",
                  "n_images", "n_pixels", "n_anomalous_images", "n_anomalous_pixels"]
        row = [f"{self.pixel_auroc:.4f}", f"{self.pixel_ap:.4f}",
               f"{self.image_auroc:.4f}", f"{self.image_ap:.4f}",
               str(self.n_images), str(self.n_pixels),
               str(self.n_anomalous_images), str(self.n_anomalous_pixels)]
        for key in sorted(self.level_entropy):
            row.append(f"{self.level_entropy[key]:.4f}")
        return [",".join(header + entropy_cols), ",".join(row)]
