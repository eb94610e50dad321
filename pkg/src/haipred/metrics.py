"""ROC analysis and report-table metrics.

All metrics are pure functions over immutable inputs. The ROC sweep groups
tied scores, so trapezoidal AUC equals the pairwise-comparison (U statistic)
probability with half credit for ties.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .ehr import PatientStay
from .labeling import EXCLUDED, POSITIVE, LabelRecord


@dataclass(frozen=True)
class ROCCurve:
    """Threshold sweep points, descending threshold, from (0,0) to (1,1)."""

    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    n_pos: int
    n_neg: int


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> ROCCurve:
    """Sweep thresholds over the distinct scores, descending, ties grouped.

    A point's threshold t means "predict positive when score >= t"; the
    leading (0, 0) point carries threshold +inf.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be aligned 1-d arrays")
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative")

    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    tp_cum = np.cumsum(y)
    fp_cum = np.cumsum(1 - y)
    last_of_group = np.nonzero(np.append(s[1:] != s[:-1], True))[0]

    fpr = np.concatenate(([0.0], fp_cum[last_of_group] / n_neg))
    tpr = np.concatenate(([0.0], tp_cum[last_of_group] / n_pos))
    thresholds = np.concatenate(([np.inf], s[last_of_group]))
    return ROCCurve(fpr=fpr, tpr=tpr, thresholds=thresholds, n_pos=n_pos, n_neg=n_neg)


_trapezoid = getattr(np, "trapezoid", None) or np.trapz


def auc(curve: ROCCurve) -> float:
    """Trapezoidal area under the curve."""
    return float(_trapezoid(curve.tpr, curve.fpr))


def auc_from_scores(scores: Sequence[float], labels: Sequence[int]) -> float:
    return auc(roc_curve(scores, labels))


def youden_threshold(curve: ROCCurve) -> float:
    """Threshold maximizing tpr - fpr; ties resolve to the larger threshold."""
    j = curve.tpr - curve.fpr
    return float(curve.thresholds[int(np.argmax(j))])


@dataclass(frozen=True)
class AveragedROC:
    """Vertically averaged curves: mean tpr with a binomial CI per grid fpr."""

    fpr_grid: np.ndarray
    mean_tpr: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    n_curves: int
    effective_n_pos: float


def _tpr_at(curve: ROCCurve, grid: np.ndarray) -> np.ndarray:
    # collapse vertical segments: keep the max tpr at each distinct fpr
    fpr_unique, inverse = np.unique(curve.fpr, return_inverse=True)
    tpr_max = np.zeros_like(fpr_unique)
    np.maximum.at(tpr_max, inverse, curve.tpr)
    return np.interp(grid, fpr_unique, tpr_max)


def vertical_average_roc(
    curves: Sequence[ROCCurve],
    grid: Optional[np.ndarray] = None,
    z: float = 1.96,
) -> AveragedROC:
    """Average tpr across curves at fixed fpr values, with binomial CIs.

    tpr is read off each curve by linear interpolation. The CI uses the
    normal approximation mean +/- z*sqrt(mean*(1-mean)/n), with n the mean
    positive count across the curves, clamped into [0, 1].
    """
    if not curves:
        raise ValueError("no curves to average")
    if grid is None:
        grid = np.linspace(0.0, 1.0, 101)
    grid = np.asarray(grid, dtype=float)
    stack = np.vstack([_tpr_at(c, grid) for c in curves])
    mean_tpr = stack.mean(axis=0)
    n_eff = float(np.mean([c.n_pos for c in curves]))
    halfwidth = z * np.sqrt(np.clip(mean_tpr * (1.0 - mean_tpr), 0.0, None) / n_eff)
    return AveragedROC(
        fpr_grid=grid,
        mean_tpr=mean_tpr,
        ci_low=np.clip(mean_tpr - halfwidth, 0.0, 1.0),
        ci_high=np.clip(mean_tpr + halfwidth, 0.0, 1.0),
        n_curves=len(curves),
        effective_n_pos=n_eff,
    )


@dataclass(frozen=True)
class DualLabelConfusion:
    """Counts over (prediction, VAP label, IRI label), all binarized."""

    threshold: float
    cells: Mapping[tuple[bool, bool, bool], int]

    def count(self, pred: bool, vap: bool, iri: bool) -> int:
        return self.cells.get((pred, vap, iri), 0)

    @property
    def total(self) -> int:
        return sum(self.cells.values())

    def vap_false_positive_other_hai_share(self) -> Optional[float]:
        """Among VAP false positives, the fraction that are IRI-positive."""
        fp_iri_pos = self.count(True, False, True)
        fp_iri_neg = self.count(True, False, False)
        fps = fp_iri_pos + fp_iri_neg
        if fps == 0:
            return None
        return fp_iri_pos / fps

    def to_dict(self) -> dict:
        names = {True: "pos", False: "neg"}
        payload = {
            f"pred_{names[p]}|vap_{names[v]}|iri_{names[i]}": self.count(p, v, i)
            for p in (True, False)
            for v in (True, False)
            for i in (True, False)
        }
        share = self.vap_false_positive_other_hai_share()
        return {
            "threshold": self.threshold,
            "cells": payload,
            "total": self.total,
            "vap_fp_other_hai_share": share,
        }


def dual_label_confusion(
    scores: Sequence[float],
    threshold: float,
    vap_labels: Sequence[bool],
    iri_labels: Sequence[bool],
) -> DualLabelConfusion:
    """8-cell partition of samples by prediction and both label sources."""
    scores = np.asarray(scores, dtype=float)
    if not (len(scores) == len(vap_labels) == len(iri_labels)):
        raise ValueError("scores and label vectors must have equal length")
    cells: dict[tuple[bool, bool, bool], int] = {}
    for score, vap, iri in zip(scores, vap_labels, iri_labels):
        key = (bool(score >= threshold), bool(vap), bool(iri))
        cells[key] = cells.get(key, 0) + 1
    return DualLabelConfusion(threshold=threshold, cells=cells)


def label_distribution_report(records: Sequence[LabelRecord]) -> dict[str, float]:
    """Percentages of the four (IRI, VAP) label combinations, 2-decimal.

    Only records carrying a definite positive/negative under both schemes
    participate; an empty selection is an error.
    """
    usable = [
        r for r in records if r.iri_label != EXCLUDED and r.vap_label != EXCLUDED
    ]
    if not usable:
        raise ValueError("no records with both labels defined")
    counts = {"pos_pos": 0, "pos_neg": 0, "neg_pos": 0, "neg_neg": 0}
    for r in usable:
        key = ("pos" if r.iri_label == POSITIVE else "neg") + "_" + (
            "pos" if r.vap_label == POSITIVE else "neg"
        )
        counts[key] += 1
    n = len(usable)
    return {
        "iri_pos_vap_pos_pct": round(100.0 * counts["pos_pos"] / n, 2),
        "iri_pos_vap_neg_pct": round(100.0 * counts["pos_neg"] / n, 2),
        "iri_neg_vap_pos_pct": round(100.0 * counts["neg_pos"] / n, 2),
        "iri_neg_vap_neg_pct": round(100.0 * counts["neg_neg"] / n, 2),
        "n": n,
    }


@dataclass(frozen=True)
class LOSComparison:
    bin_hours: float
    case_histogram: Mapping[int, int]
    control_histogram: Mapping[int, int]
    case_mean_hours: float
    control_mean_hours: float


def los_comparison(
    stays: Sequence[PatientStay],
    labels: Mapping[str, bool],
    bin_hours: float = 24.0,
) -> LOSComparison:
    """Day-binned LOS histograms and mean LOS per class.

    labels maps stay_id to case (True) / control (False); stays without an
    entry are skipped.
    """
    case_hist: dict[int, int] = {}
    control_hist: dict[int, int] = {}
    case_los: list[float] = []
    control_los: list[float] = []
    for stay in stays:
        if stay.stay_id not in labels:
            continue
        b = int(stay.los_hours // bin_hours)
        if labels[stay.stay_id]:
            case_hist[b] = case_hist.get(b, 0) + 1
            case_los.append(stay.los_hours)
        else:
            control_hist[b] = control_hist.get(b, 0) + 1
            control_los.append(stay.los_hours)
    return LOSComparison(
        bin_hours=bin_hours,
        case_histogram=dict(sorted(case_hist.items())),
        control_histogram=dict(sorted(control_hist.items())),
        case_mean_hours=float(np.mean(case_los)) if case_los else float("nan"),
        control_mean_hours=float(np.mean(control_los)) if control_los else float("nan"),
    )
