"""Experiment orchestration: {target} x {missingness strategy} over repeated splits.

One plan = one (model target, missingness strategy) pair run across n seeded
train/validation/test repetitions, each evaluated on the 4/5 common-cohort
test set, then aggregated. A four-row table runner covers the full
{IRI, VAP} x {gaussian, balanced} comparison.
"""

from __future__ import annotations

import hashlib
import traceback
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .cohort import (
    CohortSplit,
    balance_missingness,
    build_common_cohort,
    match_los,
    repeat_splits,
)
from .ehr import ValidatedDataset
from .evaluate import EvalReport, SplitOutcome, cross_label_eval, summarize_attribution
from .featurize import (
    DEFAULT_CATALOG,
    FeatureSpec,
    FeatureVector,
    WindowPolicy,
    catalog_ranges,
    feature_order,
    featurize_stays,
    impute_samples,
    labels_vector,
    stable_stream_id,
    to_matrix,
)
from .gbdt import HyperparameterGrid, select_hyperparameters
from .labeling import (
    LabelParams,
    LabelRecord,
    cohort_stay_ids,
    label_cohort,
    label_value,
)
from .metrics import (
    auc_from_scores,
    dual_label_confusion,
    label_distribution_report,
    los_comparison,
    roc_curve,
    vertical_average_roc,
    youden_threshold,
)

GAUSSIAN = "gaussian_impute"
BALANCED = "balance_missingness"
STRATEGIES = (GAUSSIAN, BALANCED)


class LeakageError(RuntimeError):
    """Raised when a test stay is found anywhere in the training-stage inputs."""


@dataclass(frozen=True)
class ExperimentPlan:
    model_target: str
    missingness_strategy: str
    apply_los_matching: Optional[bool] = None
    n_repeats: int = 5
    base_seed: int = 0
    label_params: LabelParams = field(default_factory=LabelParams)
    window_policy: WindowPolicy = field(default_factory=WindowPolicy)
    catalog: tuple[FeatureSpec, ...] = DEFAULT_CATALOG
    gap_hours: float = 24.0
    grid: HyperparameterGrid = field(default_factory=HyperparameterGrid)
    los_bin_hours: float = 24.0
    anchor_feature: str = "temperature"
    balance_epsilon: float = 0.01
    balance_test_set: bool = False
    train_fraction: float = 0.8
    validation_fraction: float = 0.2
    min_successful_splits: int = 3

    def __post_init__(self) -> None:
        if self.model_target not in ("IRI", "VAP"):
            raise ValueError(f"unknown model target {self.model_target!r}")
        if self.missingness_strategy not in STRATEGIES:
            raise ValueError(f"unknown missingness strategy {self.missingness_strategy!r}")
        if self.n_repeats < 1:
            raise ValueError("n_repeats must be >= 1")

    @property
    def los_matching_enabled(self) -> bool:
        # the ventilator model carries the LOS safeguard by default; the
        # all-HAI model does not, and a flag allows the counterfactual run
        if self.apply_los_matching is None:
            return self.model_target == "VAP"
        return self.apply_los_matching

    def describe(self) -> dict:
        return {
            "model_target": self.model_target,
            "missingness_strategy": self.missingness_strategy,
            "apply_los_matching": self.los_matching_enabled,
            "n_repeats": self.n_repeats,
            "base_seed": self.base_seed,
            "gap_hours": self.gap_hours,
            "los_bin_hours": self.los_bin_hours,
            "anchor_feature": self.anchor_feature,
            "balance_epsilon": self.balance_epsilon,
            "balance_test_set": self.balance_test_set,
            "train_fraction": self.train_fraction,
            "validation_fraction": self.validation_fraction,
            "contiguity_window_hours": self.label_params.contiguity_window_hours,
            "novelty_lookback_hours": self.label_params.novelty_lookback_hours,
        }


def stage_seed(split_seed: int, tag: str) -> int:
    """Deterministic per-stage seed independent of execution order."""
    return int(
        np.random.SeedSequence((split_seed, stable_stream_id(tag))).generate_state(1)[0]
    )


def _matched_stay_ids(
    dataset: ValidatedDataset,
    labels_by_stay: Mapping[str, LabelRecord],
    stay_ids: frozenset[str],
    target: str,
    bin_hours: float,
    seed: int,
) -> set[str]:
    cases, controls = [], []
    for sid in sorted(stay_ids):
        value = label_value(labels_by_stay[sid], target)
        if value is None:
            continue
        (cases if value else controls).append(dataset.stay(sid))
    result = match_los(cases, controls, bin_hours, seed)
    return {s.stay_id for s in cases} | {s.stay_id for s in result.retained_controls}


def _apply_strategy(
    plan: ExperimentPlan,
    samples: list[FeatureVector],
    target: str,
    seed: int,
    balance: bool,
) -> list[FeatureVector]:
    if plan.missingness_strategy == GAUSSIAN:
        return impute_samples(samples, catalog_ranges(plan.catalog), seed)
    if not balance:
        return samples
    labels = [bool(fv.label(target)) for fv in samples]
    result = balance_missingness(
        samples, labels, plan.anchor_feature, seed, plan.balance_epsilon
    )
    return result.samples


def _training_fingerprint(train_ids: Sequence[str], val_ids: Sequence[str]) -> str:
    digest = hashlib.sha256()
    for sid in sorted(train_ids):
        digest.update(b"T" + sid.encode())
    for sid in sorted(val_ids):
        digest.update(b"V" + sid.encode())
    return digest.hexdigest()


def _audit_no_leakage(
    dataset: ValidatedDataset,
    train_ids: Sequence[str],
    val_ids: Sequence[str],
    test_ids: frozenset[str],
) -> str:
    overlap = (set(train_ids) | set(val_ids)) & set(test_ids)
    if overlap:
        raise LeakageError(f"test stays present in training inputs: {sorted(overlap)[:5]}")
    test_patients = {dataset.stay(sid).patient_id for sid in test_ids}
    training_patients = {dataset.stay(sid).patient_id for sid in list(train_ids) + list(val_ids)}
    shared = test_patients & training_patients
    if shared:
        raise LeakageError(f"test patients present in training inputs: {sorted(shared)[:5]}")
    return _training_fingerprint(train_ids, val_ids)


def prepare_split_samples(
    plan: ExperimentPlan,
    dataset: ValidatedDataset,
    labels_by_stay: Mapping[str, LabelRecord],
    split: CohortSplit,
) -> dict[str, list[FeatureVector]]:
    """Cohort safeguards + featurization + missingness strategy for one split.

    Returns samples per partition name. Train and validation get LOS matching
    (when the plan enables it) and the missingness strategy; the test set is
    imputed under the gaussian strategy but balanced only when the plan says
    so. Raises LeakageError if any test stay or patient leaks into training.
    """
    target = plan.model_target
    train_ids: set[str] = set(split.train)
    val_ids: set[str] = set(split.validation)
    if plan.los_matching_enabled:
        train_ids = _matched_stay_ids(
            dataset, labels_by_stay, frozenset(train_ids), target,
            plan.los_bin_hours, stage_seed(split.seed, "match_train"),
        )
        try:
            val_ids = _matched_stay_ids(
                dataset, labels_by_stay, frozenset(val_ids), target,
                plan.los_bin_hours, stage_seed(split.seed, "match_validation"),
            )
        except ValueError:
            # a validation draw with a single class cannot be matched; leave it
            # as drawn rather than failing the split (selection will surface a
            # clear error if it is unusable for AUC)
            pass
    _audit_no_leakage(dataset, sorted(train_ids), sorted(val_ids), split.test)

    def featurize(ids, tag):
        return featurize_stays(
            dataset, labels_by_stay, ids, target,
            plan.catalog, plan.window_policy, plan.gap_hours,
            master_seed=stage_seed(split.seed, f"featurize_{tag}"),
        ).samples

    samples = {
        "train": featurize(train_ids, "train"),
        "validation": featurize(val_ids, "validation"),
        "test": featurize(split.test, "test"),
    }
    # balancing is anchored in training patients only; validation and test
    # keep their natural missingness (residual gaps are routed by the trees'
    # learned default directions), with an opt-in flag for the test set
    samples["train"] = _apply_strategy(
        plan, samples["train"], target, stage_seed(split.seed, "strategy_train"), balance=True
    )
    samples["validation"] = _apply_strategy(
        plan, samples["validation"], target, stage_seed(split.seed, "strategy_validation"),
        balance=False,
    )
    samples["test"] = _apply_strategy(
        plan, samples["test"], target, stage_seed(split.seed, "strategy_test"),
        balance=plan.balance_test_set,
    )
    return samples


def fit_split(plan: ExperimentPlan, samples: Mapping[str, list[FeatureVector]], split_seed: int):
    """Hyperparameter selection over the split's train/validation matrices."""
    order = feature_order(plan.catalog)
    target = plan.model_target
    return select_hyperparameters(
        to_matrix(samples["train"], order),
        labels_vector(samples["train"], target),
        to_matrix(samples["validation"], order),
        labels_vector(samples["validation"], target),
        plan.grid,
        stage_seed(split_seed, "selection"),
    )


def measure_split(
    plan: ExperimentPlan,
    model,
    samples: Mapping[str, list[FeatureVector]],
    outcome: SplitOutcome,
) -> SplitOutcome:
    """Fill a SplitOutcome with every per-split metric from a trained model."""
    order = feature_order(plan.catalog)
    target = plan.model_target
    X_train = to_matrix(samples["train"], order)
    y_train = labels_vector(samples["train"], target)
    X_val = to_matrix(samples["validation"], order)
    y_val = labels_vector(samples["validation"], target)
    X_test = to_matrix(samples["test"], order)
    y_test = labels_vector(samples["test"], target)
    outcome.n_train, outcome.n_validation, outcome.n_test = (
        len(samples["train"]), len(samples["validation"]), len(samples["test"]),
    )
    outcome.chosen_hyperparams = dict(
        sorted(
            {
                "max_depth": model.hyperparams.max_depth,
                "n_rounds": model.hyperparams.n_rounds,
                "learning_rate": model.hyperparams.learning_rate,
                "l2_reg": model.hyperparams.l2_reg,
                "min_split_gain": model.hyperparams.min_split_gain,
                "min_child_weight": model.hyperparams.min_child_weight,
            }.items()
        )
    )

    outcome.auc_train = auc_from_scores(model.predict(X_train), y_train)
    outcome.auc_validation = auc_from_scores(model.predict(X_val), y_val)
    scores_test = model.predict(X_test)
    outcome.auc_test = auc_from_scores(scores_test, y_test)

    # the operating threshold comes from the validation curve, never the test set
    val_curve = roc_curve(model.predict(X_val), y_val)
    theta = youden_threshold(val_curve)
    outcome.youden_threshold = theta
    outcome.confusion = dual_label_confusion(
        scores_test,
        theta,
        [bool(fv.label_vap) for fv in samples["test"]],
        [bool(fv.label_iri) for fv in samples["test"]],
    )
    for label_source in ("IRI", "VAP"):
        auc_value, curve = cross_label_eval(scores_test, samples["test"], label_source)
        outcome.test_auc_by_label[label_source] = auc_value
        outcome.test_curves[label_source] = curve
    return outcome


def run_split(
    plan: ExperimentPlan,
    dataset: ValidatedDataset,
    labels_by_stay: Mapping[str, LabelRecord],
    split: CohortSplit,
) -> tuple[SplitOutcome, Optional[tuple]]:
    """Run one repetition end to end; returns (outcome, (model, test samples))."""
    outcome = SplitOutcome(split_id=split.split_id, seed=split.seed)
    try:
        samples = prepare_split_samples(plan, dataset, labels_by_stay, split)
        selection = fit_split(plan, samples, split.seed)
        model = selection.best_model
        measure_split(plan, model, samples, outcome)
        return outcome, (model, samples["test"])
    except (KeyboardInterrupt, SystemExit):
        raise
    except Exception as exc:  # noqa: BLE001 - a failed split is a recorded outcome
        outcome.status = "failed"
        outcome.error = f"{type(exc).__name__}: {exc}"
        outcome.test_curves = {}
        _ = traceback.format_exc()
        return outcome, None


def run_experiment(
    plan: ExperimentPlan,
    dataset: ValidatedDataset,
    labels: Optional[Sequence[LabelRecord]] = None,
) -> EvalReport:
    """Execute the full plan: label, split, featurize, train, evaluate, aggregate.

    Stage errors abort only their split and are recorded in the report;
    aggregates require at least min_successful_splits successes. Fully
    deterministic for a fixed plan and dataset.
    """
    if labels is None:
        labels = label_cohort(dataset, plan.label_params)
    labels_by_stay = {r.stay_id: r for r in labels}

    iri_cohort = cohort_stay_ids(labels, "IRI")
    vap_cohort = cohort_stay_ids(labels, "VAP")
    common = build_common_cohort(iri_cohort, vap_cohort)
    model_cohort = iri_cohort if plan.model_target == "IRI" else vap_cohort

    splits = repeat_splits(
        model_cohort,
        common,
        dataset.stays_by_id,
        n=plan.n_repeats,
        base_seed=plan.base_seed,
        fractions=(plan.train_fraction, plan.validation_fraction),
    )

    report = EvalReport(
        plan=plan.describe(),
        splits=[],
        min_successful_splits=plan.min_successful_splits,
    )
    models: dict[int, object] = {}
    attribution_totals: dict[str, float] = {}
    n_attributed = 0
    curves_by_label: dict[str, list] = {"IRI": [], "VAP": []}

    for split in splits:
        outcome, payload = run_split(plan, dataset, labels_by_stay, split)
        report.splits.append(outcome)
        if payload is None:
            continue
        model, test_samples = payload
        models[split.split_id] = model
        for label_source, curve in outcome.test_curves.items():
            curves_by_label[label_source].append(curve)
        summary = summarize_attribution(model, test_samples, feature_order(plan.catalog))
        for name, value in summary.items():
            attribution_totals[name] = attribution_totals.get(name, 0.0) + value
        n_attributed += 1

    if n_attributed:
        report.attribution = {
            "mean_abs_contribution": {
                name: total / n_attributed for name, total in sorted(attribution_totals.items())
            }
        }
    for label_source, curves in curves_by_label.items():
        if curves:
            avg = vertical_average_roc(curves)
            report.averaged_roc[label_source] = {
                "fpr_grid": [float(v) for v in avg.fpr_grid],
                "mean_tpr": [float(v) for v in avg.mean_tpr],
                "ci_low": [float(v) for v in avg.ci_low],
                "ci_high": [float(v) for v in avg.ci_high],
                "n_curves": avg.n_curves,
                "effective_n_pos": avg.effective_n_pos,
            }

    case_by_stay = {
        r.stay_id: (label_value(r, plan.model_target) is True)
        for r in labels
        if label_value(r, plan.model_target) is not None
    }
    report.los = los_comparison(
        [dataset.stay(sid) for sid in sorted(model_cohort)], case_by_stay, plan.los_bin_hours
    )
    common_records = [labels_by_stay[sid] for sid in sorted(common)]
    if common_records:
        report.label_distribution = label_distribution_report(common_records)

    report.finalize()
    report.models = models  # in-memory only, not serialized
    return report


TABLE_ROWS = (
    ("IRI", GAUSSIAN),
    ("IRI", BALANCED),
    ("VAP", GAUSSIAN),
    ("VAP", BALANCED),
)


def run_table(
    base_plan: ExperimentPlan,
    dataset: ValidatedDataset,
    labels: Optional[Sequence[LabelRecord]] = None,
    rows: Sequence[tuple[str, str]] = TABLE_ROWS,
) -> dict[str, EvalReport]:
    """Run the four-row comparison; keys are '<target>__<strategy>'."""
    if labels is None:
        labels = label_cohort(dataset, base_plan.label_params)
    out = {}
    for target, strategy in rows:
        plan = replace(
            base_plan,
            model_target=target,
            missingness_strategy=strategy,
            apply_los_matching=None,
        )
        out[f"{target}__{strategy}"] = run_experiment(plan, dataset, labels)
    return out


def summary_table(reports: Mapping[str, EvalReport]) -> str:
    """Human-readable table: one row per (model, strategy), AUC mean +/- std."""
    header = f"{'Model':<42} {'Training':>16} {'Validation':>16} {'Testing':>16}"
    lines = [header, "-" * len(header)]
    pretty = {GAUSSIAN: "gaussian imputation", BALANCED: "balanced missingness"}
    for key, report in reports.items():
        target, strategy = key.split("__", 1)
        name = f"{target} with {pretty.get(strategy, strategy)}"
        agg = report.aggregate
        if agg.get("unavailable"):
            lines.append(f"{name:<42} {'(failed)':>16} {'':>16} {'':>16}")
            continue

        def fmt(entry):
            return f"{entry['mean']:.2f} +/- {entry['std']:.2f}"

        lines.append(
            f"{name:<42} {fmt(agg['train_auc']):>16} "
            f"{fmt(agg['validation_auc']):>16} {fmt(agg['test_auc']):>16}"
        )
    return "\n".join(lines) + "\n"
