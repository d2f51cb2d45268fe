"""Ranking metrics for multi-label evaluation: macro mAP and macro ROC-AUC.

Average precision follows the rank-by-rank definition (precision read off at
each positive's rank, averaged over positives); ROC-AUC uses the
Mann-Whitney rank statistic with midranks so ties contribute one half.
Classes that cannot be scored (no positives; for AUC also no negatives) are
skipped and reported, not silently folded into the mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MetricError(ValueError):
    pass


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """AP of one class.  Ties in score rank by ascending original index."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    if scores.shape != labels.shape:
        raise MetricError(f"scores {scores.shape} vs labels {labels.shape}")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricError("average_precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    cum_pos = np.cumsum(ranked)
    ranks = np.arange(1, len(ranked) + 1)
    precisions = cum_pos[ranked == 1] / ranks[ranked == 1]
    return float(precisions.mean())


def _midranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks in ascending order, tied scores share the mean rank."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """AUC of one class via the rank statistic; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    if scores.shape != labels.shape:
        raise MetricError(f"scores {scores.shape} vs labels {labels.shape}")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("roc_auc needs at least one positive and one negative")
    ranks = _midranks(scores)
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass
class RankingReport:
    """Macro metrics plus the per-class breakdown and skipped classes.

    A macro metric is ``None`` when no class qualifies for it.
    """

    map: float | None
    auc: float | None
    ap_per_class: dict[int, float] = field(default_factory=dict)
    auc_per_class: dict[int, float] = field(default_factory=dict)
    skipped_ap: list[int] = field(default_factory=list)
    skipped_auc: list[int] = field(default_factory=list)

    def summary_lines(self) -> list[str]:
        map_s = f"{self.map:.6f}" if self.map is not None else "undefined"
        auc_s = f"{self.auc:.6f}" if self.auc is not None else "undefined"
        lines = [f"mAP {map_s}", f"AUC {auc_s}"]
        for c in sorted(set(self.ap_per_class) | set(self.auc_per_class)):
            ap = self.ap_per_class.get(c)
            auc = self.auc_per_class.get(c)
            ap_s = f"{ap:.6f}" if ap is not None else "skipped"
            auc_s = f"{auc:.6f}" if auc is not None else "skipped"
            lines.append(f"class {c} ap={ap_s} auc={auc_s}")
        if self.skipped_ap:
            lines.append("skipped_ap " + ",".join(map(str, self.skipped_ap)))
        if self.skipped_auc:
            lines.append("skipped_auc " + ",".join(map(str, self.skipped_auc)))
        return lines

    def keyvalue_lines(self) -> list[str]:
        map_s = f"{self.map:.12g}" if self.map is not None else "nan"
        auc_s = f"{self.auc:.12g}" if self.auc is not None else "nan"
        lines = [f"map={map_s}", f"auc={auc_s}"]
        for c in sorted(self.ap_per_class):
            lines.append(f"ap_class_{c}={self.ap_per_class[c]:.12g}")
        for c in sorted(self.auc_per_class):
            lines.append(f"auc_class_{c}={self.auc_per_class[c]:.12g}")
        lines.append("skipped_ap_classes=" + ",".join(map(str, self.skipped_ap)))
        lines.append("skipped_auc_classes=" + ",".join(map(str, self.skipped_auc)))
        return lines


def ranking_report(scores: np.ndarray, labels: np.ndarray) -> RankingReport:
    """Per-class AP/AUC over an (M, C) score matrix and binary label matrix."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.ndim != 2 or scores.shape != labels.shape:
        raise MetricError(f"expected matching (M, C) matrices, got {scores.shape} and {labels.shape}")
    ap_per, auc_per = {}, {}
    skipped_ap, skipped_auc = [], []
    for c in range(scores.shape[1]):
        col_scores, col_labels = scores[:, c], labels[:, c]
        n_pos = int(col_labels.sum())
        n_neg = len(col_labels) - n_pos
        if n_pos == 0:
            skipped_ap.append(c)
        else:
            ap_per[c] = average_precision(col_scores, col_labels)
        if n_pos == 0 or n_neg == 0:
            skipped_auc.append(c)
        else:
            auc_per[c] = roc_auc(col_scores, col_labels)
    return RankingReport(
        map=float(np.mean(list(ap_per.values()))) if ap_per else None,
        auc=float(np.mean(list(auc_per.values()))) if auc_per else None,
        ap_per_class=ap_per,
        auc_per_class=auc_per,
        skipped_ap=skipped_ap,
        skipped_auc=skipped_auc,
    )


def mean_average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Macro mean of per-class AP; classes without positives are skipped."""
    result = ranking_report(scores, labels).map
    if result is None:
        raise MetricError("no class has a positive example; mAP undefined")
    return result


def auc_roc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Macro mean of per-class AUC; one-sided classes are skipped."""
    result = ranking_report(scores, labels).auc
    if result is None:
        raise MetricError("no class has both positives and negatives; AUC undefined")
    return result
