"""Model evaluation: cross-label AUCs, routed predictions, report assembly."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .attribution import attribution_summary
from .ehr import PatientStay
from .featurize import FeatureVector, labels_vector, to_matrix
from .gbdt import GBDTModel
from .metrics import (
    AveragedROC,
    DualLabelConfusion,
    LOSComparison,
    ROCCurve,
    auc,
    roc_curve,
)


def cross_label_eval(
    scores: Sequence[float],
    samples: Sequence[FeatureVector],
    label_source: str,
) -> tuple[float, ROCCurve]:
    """Score the same predictions against either label vector."""
    y = labels_vector(samples, label_source)
    curve = roc_curve(np.asarray(scores, dtype=float), y)
    return auc(curve), curve


def route_model(
    stay: PatientStay,
    iri_model: GBDTModel,
    vap_model: GBDTModel,
    fv: FeatureVector,
    feature_order: Sequence[str],
) -> tuple[float, str]:
    """Ventilated stays get the ventilator-specific model, others the all-HAI one."""
    model, tag = (vap_model, "VAP") if stay.mechanically_ventilated else (iri_model, "IRI")
    x = to_matrix([fv], feature_order)
    return float(model.predict(x)[0]), tag


@dataclass
class SplitOutcome:
    """Everything measured for one train/validation/test repetition."""

    split_id: int
    seed: int
    status: str = "ok"
    error: Optional[str] = None
    auc_train: Optional[float] = None
    auc_validation: Optional[float] = None
    auc_test: Optional[float] = None
    test_auc_by_label: dict = field(default_factory=dict)
    youden_threshold: Optional[float] = None
    confusion: Optional[DualLabelConfusion] = None
    n_train: int = 0
    n_validation: int = 0
    n_test: int = 0
    chosen_hyperparams: Optional[dict] = None
    test_curves: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        payload = {
            "split_id": self.split_id,
            "seed": self.seed,
            "status": self.status,
            "auc": {
                "train": self.auc_train,
                "validation": self.auc_validation,
                "test": self.auc_test,
            },
            "test_auc_by_label": dict(sorted(self.test_auc_by_label.items())),
            "youden_threshold": self.youden_threshold,
            "n_samples": {
                "train": self.n_train,
                "validation": self.n_validation,
                "test": self.n_test,
            },
            "chosen_hyperparams": self.chosen_hyperparams,
        }
        if self.error:
            payload["error"] = self.error
        if self.confusion is not None:
            payload["confusion"] = self.confusion.to_dict()
        return payload


def _mean_std(values: Sequence[float]) -> dict:
    arr = np.asarray(values, dtype=float)
    return {
        "mean": float(arr.mean()),
        "std": float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
        "n": int(arr.size),
    }


def _averaged_roc_dict(avg: AveragedROC) -> dict:
    return {
        "fpr_grid": [float(v) for v in avg.fpr_grid],
        "mean_tpr": [float(v) for v in avg.mean_tpr],
        "ci_low": [float(v) for v in avg.ci_low],
        "ci_high": [float(v) for v in avg.ci_high],
        "n_curves": avg.n_curves,
        "effective_n_pos": avg.effective_n_pos,
    }


def _los_dict(cmp: LOSComparison) -> dict:
    return {
        "bin_hours": cmp.bin_hours,
        "case_histogram": {str(k): v for k, v in cmp.case_histogram.items()},
        "control_histogram": {str(k): v for k, v in cmp.control_histogram.items()},
        "case_mean_hours": cmp.case_mean_hours,
        "control_mean_hours": cmp.control_mean_hours,
    }


@dataclass
class EvalReport:
    """Per-split metrics plus aggregates; serializes to deterministic JSON."""

    plan: dict
    splits: list[SplitOutcome]
    aggregate: dict = field(default_factory=dict)
    averaged_roc: dict = field(default_factory=dict)
    attribution: dict = field(default_factory=dict)
    los: Optional[LOSComparison] = None
    label_distribution: dict = field(default_factory=dict)
    min_successful_splits: int = 3

    @property
    def successful(self) -> list[SplitOutcome]:
        return [s for s in self.splits if s.status == "ok"]

    def finalize(self) -> None:
        """Recompute aggregates from the per-split outcomes."""
        ok = self.successful
        if len(ok) >= self.min_successful_splits:
            self.aggregate = {
                "train_auc": _mean_std([s.auc_train for s in ok]),
                "validation_auc": _mean_std([s.auc_validation for s in ok]),
                "test_auc": _mean_std([s.auc_test for s in ok]),
            }
            by_label: dict[str, list[float]] = {}
            for s in ok:
                for label, value in s.test_auc_by_label.items():
                    by_label.setdefault(label, []).append(value)
            self.aggregate["test_auc_by_label"] = {
                label: _mean_std(values) for label, values in sorted(by_label.items())
            }
        else:
            self.aggregate = {
                "unavailable": True,
                "reason": f"only {len(ok)} successful splits; "
                f"{self.min_successful_splits} required",
            }

    def to_dict(self) -> dict:
        return {
            "plan": self.plan,
            "splits": [s.to_dict() for s in self.splits],
            "aggregate": self.aggregate,
            "averaged_roc": self.averaged_roc,
            "attribution": self.attribution,
            "los_comparison": _los_dict(self.los) if self.los else None,
            "label_distribution": self.label_distribution,
            "failures": [
                {"split_id": s.split_id, "error": s.error}
                for s in self.splits
                if s.status != "ok"
            ],
        }


def summarize_attribution(
    model: GBDTModel, samples: Sequence[FeatureVector], order: Sequence[str], cap: int = 200
) -> dict[str, float]:
    """Mean |contribution| per feature over (at most cap) samples."""
    subset = samples[:cap]
    if not subset:
        return {}
    return attribution_summary(model, to_matrix(subset, order))
