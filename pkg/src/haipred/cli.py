"""Batch command-line entry point.

Stages form a pipeline over a run directory:

    generate -> label -> cohort -> featurize -> train -> evaluate

plus `experiment`, which runs every configured table row end to end. Each
stage writes a manifest of its config and input hashes; rerunning a stage
whose inputs are unchanged is a logged no-op. Missing upstream artifacts
produce a "run stage X first" error with exit code 2.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import click

from . import io as hio
from .cohort import repeat_splits, split_to_manifest, splits_from_manifest
from .config import ConfigError, PipelineConfig, load_pipeline_config
from .ehr import validate_dataset
from .evaluate import EvalReport, SplitOutcome
from .experiment import (
    ExperimentPlan,
    fit_split,
    measure_split,
    prepare_split_samples,
    run_experiment,
    run_table,
    summary_table,
)
from .featurize import FeatureVector, feature_order
from .gbdt import load_model, save_model
from .labeling import LabelRecord, cohort_stay_ids, label_cohort
from .plots import render_report_plots
from .synthgen import generate_population

DEPENDENCY_EXIT = 2


class DependencyError(click.ClickException):
    exit_code = DEPENDENCY_EXIT


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _config_hash(cfg: PipelineConfig, stage: str, row: Optional[int]) -> str:
    payload = json.dumps(
        {"config": cfg.raw, "stage": stage, "row": row, "seed": cfg.seed, "out": str(cfg.output_dir)},
        sort_keys=True,
        default=str,
    )
    return hashlib.sha256(payload.encode()).hexdigest()


def _require(path: Path, produced_by: str) -> Path:
    if not path.exists():
        raise DependencyError(f"missing {path}; run '{produced_by}' first")
    return path


class StageCache:
    """Input-hash manifest so completed stages become no-ops on rerun."""

    def __init__(self, cfg: PipelineConfig, stage: str, stage_dir: Path, row: Optional[int] = None):
        self.stage = stage
        self.stage_dir = stage_dir
        self.manifest_path = stage_dir / "manifest.json"
        self.config_hash = _config_hash(cfg, stage, row)

    def is_fresh(self, inputs: Sequence[Path]) -> bool:
        if not self.manifest_path.exists():
            return False
        manifest = json.loads(self.manifest_path.read_text())
        if manifest.get("config_hash") != self.config_hash:
            return False
        recorded = manifest.get("inputs", {})
        current = {str(p): _sha256_file(p) for p in inputs if p.exists()}
        if recorded != current:
            return False
        return all(Path(p).exists() for p in manifest.get("outputs", []))

    def write(self, inputs: Sequence[Path], outputs: Sequence[Path]) -> None:
        self.stage_dir.mkdir(parents=True, exist_ok=True)
        manifest = {
            "stage": self.stage,
            "config_hash": self.config_hash,
            "inputs": {str(p): _sha256_file(p) for p in inputs},
            "outputs": sorted(str(p) for p in outputs),
        }
        hio.write_json(self.manifest_path, manifest)


def _load_config(config_path: str, out: Optional[str], seed: Optional[int]) -> PipelineConfig:
    try:
        cfg = load_pipeline_config(config_path)
    except ConfigError as exc:
        raise click.ClickException(str(exc)) from exc
    if out is not None or seed is not None:
        from dataclasses import replace

        cfg = replace(
            cfg,
            output_dir=Path(out) if out is not None else cfg.output_dir,
            seed=seed if seed is not None else cfg.seed,
        )
    return cfg


def _dataset_dir(cfg: PipelineConfig) -> Path:
    return cfg.output_dir / "dataset"


def _labels_path(cfg: PipelineConfig) -> Path:
    return cfg.output_dir / "labels" / "labels.csv"


def _splits_path(cfg: PipelineConfig, row: int) -> Path:
    return cfg.output_dir / "cohort" / f"row{row}" / "splits.jsonl"


def _features_dir(cfg: PipelineConfig, row: int) -> Path:
    return cfg.output_dir / "features" / f"row{row}"


def _models_dir(cfg: PipelineConfig, row: int) -> Path:
    return cfg.output_dir / "models" / f"row{row}"


def _report_dir(cfg: PipelineConfig, row: int) -> Path:
    return cfg.output_dir / "report" / f"row{row}"


def _load_dataset(cfg: PipelineConfig):
    directory = _require(_dataset_dir(cfg), "generate")
    _require(directory / "stays.csv", "generate")
    stays, clinical, meds, cultures, dx = hio.read_dataset_files(directory)
    return validate_dataset(stays, clinical, meds, cultures, dx)


def _read_labels(path: Path) -> list[LabelRecord]:
    records = []
    with path.open(encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(
                LabelRecord(
                    stay_id=row["stay_id"],
                    iri_label=row["iri_label"],
                    vap_label=row["vap_label"],
                    iri_onset=int(row["iri_onset"]) if row["iri_onset"] else None,
                    vap_onset=int(row["vap_onset"]) if row["vap_onset"] else None,
                )
            )
    return records


def _write_feature_csvs(
    directory: Path, tag: str, samples: Sequence[FeatureVector], order: Sequence[str]
) -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    values_path = directory / f"{tag}_values.csv"
    mask_path = directory / f"{tag}_mask.csv"
    meta = ["sample_id", "stay_id", "prediction_time", "label_iri", "label_vap"]
    with values_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(meta + list(order))
        for fv in samples:
            row = [
                fv.sample_id,
                fv.stay_id,
                fv.prediction_time,
                "" if fv.label_iri is None else str(fv.label_iri).lower(),
                "" if fv.label_vap is None else str(fv.label_vap).lower(),
            ]
            row += [("" if fv.values[n] is None else repr(fv.values[n])) for n in order]
            writer.writerow(row)
    with mask_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id"] + list(order))
        for fv in samples:
            writer.writerow([fv.sample_id] + [str(fv.missing_mask[n]).lower() for n in order])
    return [values_path, mask_path]


def _read_feature_csvs(directory: Path, tag: str, order: Sequence[str]) -> list[FeatureVector]:
    values_path = _require(directory / f"{tag}_values.csv", "featurize")
    mask_path = _require(directory / f"{tag}_mask.csv", "featurize")
    masks = {}
    with mask_path.open(encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            masks[row["sample_id"]] = {n: row[n] == "true" for n in order}
    samples = []
    with values_path.open(encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            values = {n: (float(row[n]) if row[n] != "" else None) for n in order}
            samples.append(
                FeatureVector(
                    sample_id=row["sample_id"],
                    stay_id=row["stay_id"],
                    prediction_time=int(row["prediction_time"]),
                    values=values,
                    missing_mask=masks[row["sample_id"]],
                    label_iri=(None if row["label_iri"] == "" else row["label_iri"] == "true"),
                    label_vap=(None if row["label_vap"] == "" else row["label_vap"] == "true"),
                )
            )
    return samples


@click.group()
def main() -> None:
    """Infection-prediction pipeline: synthetic data, labels, cohorts, models, reports."""


def _common_options(fn):
    fn = click.option("--config", "config_path", required=True, type=click.Path(), help="Pipeline config YAML.")(fn)
    fn = click.option("--out", default=None, type=click.Path(), help="Override output directory.")(fn)
    fn = click.option("--seed", default=None, type=int, help="Override the pipeline seed.")(fn)
    fn = click.option(
        "--jobs",
        default=lambda: int(os.environ.get("HAIPRED_JOBS", "1")),
        type=int,
        help="Worker threads for independent table rows (default $HAIPRED_JOBS or 1).",
    )(fn)
    return fn


@main.command()
@_common_options
def generate(config_path, out, seed, jobs) -> None:
    """Generate the synthetic dataset files."""
    del jobs
    cfg = _load_config(config_path, out, seed)
    stage_dir = _dataset_dir(cfg)
    cache = StageCache(cfg, "generate", stage_dir)
    if cache.is_fresh([]):
        click.echo(f"[cached] generate: {stage_dir}")
        return
    dataset, truth = generate_population(cfg.scenario)
    outputs = hio.write_dataset_files(stage_dir, dataset)
    truth_path = stage_dir / "ground_truth.json"
    hio.write_json(
        truth_path,
        {
            "plants": {
                sid: {"category": p.category, "onset_time": p.onset_time, "coded": p.coded}
                for sid, p in sorted(truth.plants.items())
            },
            "suppressed_features": {
                sid: list(feats) for sid, feats in sorted(truth.suppressed_features.items())
            },
        },
    )
    outputs.append(truth_path)
    cache.write([], outputs)
    click.echo(f"generate: {len(dataset.stays)} stays, {len(dataset.clinical_events)} events -> {stage_dir}")


@main.command()
@_common_options
def label(config_path, out, seed, jobs) -> None:
    """Label every stay under both schemes."""
    del jobs
    cfg = _load_config(config_path, out, seed)
    dataset = _load_dataset(cfg)
    labels_path = _labels_path(cfg)
    cache = StageCache(cfg, "label", labels_path.parent)
    inputs = sorted(_dataset_dir(cfg).glob("*.csv"))
    if cache.is_fresh(inputs):
        click.echo(f"[cached] label: {labels_path}")
        return
    records = label_cohort(dataset, cfg.label_params)
    hio.write_records(labels_path, records, LabelRecord)
    cache.write(inputs, [labels_path])
    n_pos_iri = sum(1 for r in records if r.iri_label == "positive")
    n_pos_vap = sum(1 for r in records if r.vap_label == "positive")
    click.echo(f"label: {len(records)} stays ({n_pos_iri} IRI+, {n_pos_vap} VAP+) -> {labels_path}")


@main.command()
@_common_options
@click.option("--row", default=0, type=int, help="Experiment row index (target, strategy).")
def cohort(config_path, out, seed, jobs, row) -> None:
    """Build the seeded split manifests for one experiment row."""
    del jobs
    cfg = _load_config(config_path, out, seed)
    dataset = _load_dataset(cfg)
    labels_path = _require(_labels_path(cfg), "label")
    plan = cfg.plan_for_row(row)
    splits_path = _splits_path(cfg, row)
    cache = StageCache(cfg, "cohort", splits_path.parent, row)
    if cache.is_fresh([labels_path]):
        click.echo(f"[cached] cohort: {splits_path}")
        return
    records = _read_labels(labels_path)
    iri_ids = cohort_stay_ids(records, "IRI")
    vap_ids = cohort_stay_ids(records, "VAP")
    common = iri_ids & vap_ids
    model_cohort = iri_ids if plan.model_target == "IRI" else vap_ids
    splits = repeat_splits(
        model_cohort,
        common,
        dataset.stays_by_id,
        n=plan.n_repeats,
        base_seed=plan.base_seed,
        fractions=(plan.train_fraction, plan.validation_fraction),
    )
    splits_path.parent.mkdir(parents=True, exist_ok=True)
    with splits_path.open("w", encoding="utf-8") as fh:
        for split in splits:
            for entry in split_to_manifest(split):
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    cache.write([labels_path], [splits_path])
    click.echo(f"cohort: {len(splits)} splits over {len(model_cohort)} stays -> {splits_path}")


@main.command()
@_common_options
@click.option("--row", default=0, type=int, help="Experiment row index (target, strategy).")
def featurize(config_path, out, seed, jobs, row) -> None:
    """Featurize each split's partitions and apply the row's missingness strategy."""
    del jobs
    cfg = _load_config(config_path, out, seed)
    dataset = _load_dataset(cfg)
    labels_path = _require(_labels_path(cfg), "label")
    splits_path = _require(_splits_path(cfg, row), "cohort")
    plan = cfg.plan_for_row(row)
    out_dir = _features_dir(cfg, row)
    cache = StageCache(cfg, "featurize", out_dir, row)
    inputs = [labels_path, splits_path]
    if cache.is_fresh(inputs):
        click.echo(f"[cached] featurize: {out_dir}")
        return
    records = _read_labels(labels_path)
    labels_by_stay = {r.stay_id: r for r in records}
    splits = splits_from_manifest(
        [json.loads(line) for line in splits_path.read_text().splitlines() if line]
    )
    order = feature_order(plan.catalog)
    outputs: list[Path] = []
    for split in splits:
        samples = prepare_split_samples(plan, dataset, labels_by_stay, split)
        for part, part_samples in samples.items():
            outputs += _write_feature_csvs(out_dir, f"split{split.split_id}_{part}", part_samples, order)
    cache.write(inputs, outputs)
    click.echo(f"featurize: {len(splits)} splits -> {out_dir}")


@main.command()
@_common_options
@click.option("--row", default=0, type=int, help="Experiment row index (target, strategy).")
def train(config_path, out, seed, jobs, row) -> None:
    """Grid-search and train one model per split."""
    del jobs
    cfg = _load_config(config_path, out, seed)
    plan = cfg.plan_for_row(row)
    features_dir = _require(_features_dir(cfg, row), "featurize")
    splits_path = _require(_splits_path(cfg, row), "cohort")
    models_dir = _models_dir(cfg, row)
    cache = StageCache(cfg, "train", models_dir, row)
    inputs = sorted(features_dir.glob("*.csv"))
    if cache.is_fresh(inputs):
        click.echo(f"[cached] train: {models_dir}")
        return
    splits = splits_from_manifest(
        [json.loads(line) for line in splits_path.read_text().splitlines() if line]
    )
    order = feature_order(plan.catalog)
    models_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for split in splits:
        samples = {
            part: _read_feature_csvs(features_dir, f"split{split.split_id}_{part}", order)
            for part in ("train", "validation")
        }
        try:
            selection = fit_split(plan, samples, split.seed)
        except Exception as exc:  # recorded, not fatal: evaluate reports the gap
            log_path = models_dir / f"selection_log_split{split.split_id}.json"
            hio.write_json(log_path, {"status": "failed", "error": f"{type(exc).__name__}: {exc}"})
            outputs.append(log_path)
            continue
        model_path = models_dir / f"split{split.split_id}.json"
        save_model(model_path, selection.best_model)
        log_path = models_dir / f"selection_log_split{split.split_id}.json"
        hio.write_json(log_path, {"status": "ok", "cells": selection.log})
        outputs += [model_path, log_path]
    cache.write(inputs, outputs)
    click.echo(f"train: {len(splits)} splits -> {models_dir}")


@main.command()
@_common_options
@click.option("--row", default=0, type=int, help="Experiment row index (target, strategy).")
def evaluate(config_path, out, seed, jobs, row) -> None:
    """Evaluate trained models on the common test sets and write the report."""
    del jobs
    cfg = _load_config(config_path, out, seed)
    plan = cfg.plan_for_row(row)
    dataset = _load_dataset(cfg)
    labels_path = _require(_labels_path(cfg), "label")
    features_dir = _require(_features_dir(cfg, row), "featurize")
    models_dir = _require(_models_dir(cfg, row), "train")
    splits_path = _require(_splits_path(cfg, row), "cohort")
    report_dir = _report_dir(cfg, row)
    cache = StageCache(cfg, "evaluate", report_dir, row)
    inputs = sorted(features_dir.glob("*.csv")) + sorted(models_dir.glob("*.json")) + [labels_path]
    if cache.is_fresh(inputs):
        click.echo(f"[cached] evaluate: {report_dir}")
        return

    from .metrics import label_distribution_report, los_comparison, vertical_average_roc
    from .labeling import label_value

    records = _read_labels(labels_path)
    labels_by_stay = {r.stay_id: r for r in records}
    splits = splits_from_manifest(
        [json.loads(line) for line in splits_path.read_text().splitlines() if line]
    )
    order = feature_order(plan.catalog)
    report = EvalReport(plan=plan.describe(), splits=[])
    curves_by_label: dict[str, list] = {"IRI": [], "VAP": []}
    for split in splits:
        outcome = SplitOutcome(split_id=split.split_id, seed=split.seed)
        model_path = models_dir / f"split{split.split_id}.json"
        if not model_path.exists():
            outcome.status = "failed"
            outcome.error = "no trained model for this split"
            report.splits.append(outcome)
            continue
        model = load_model(model_path)
        samples = {
            part: _read_feature_csvs(features_dir, f"split{split.split_id}_{part}", order)
            for part in ("train", "validation", "test")
        }
        try:
            measure_split(plan, model, samples, outcome)
            for label_source, curve in outcome.test_curves.items():
                curves_by_label[label_source].append(curve)
        except Exception as exc:
            outcome.status = "failed"
            outcome.error = f"{type(exc).__name__}: {exc}"
        report.splits.append(outcome)

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
    iri_ids = cohort_stay_ids(records, "IRI")
    vap_ids = cohort_stay_ids(records, "VAP")
    model_cohort = iri_ids if plan.model_target == "IRI" else vap_ids
    case_by_stay = {
        r.stay_id: (label_value(r, plan.model_target) is True)
        for r in records
        if label_value(r, plan.model_target) is not None
    }
    report.los = los_comparison(
        [dataset.stay(sid) for sid in sorted(model_cohort)], case_by_stay, plan.los_bin_hours
    )
    common_records = [labels_by_stay[sid] for sid in sorted(iri_ids & vap_ids)]
    if common_records:
        report.label_distribution = label_distribution_report(common_records)
    report.finalize()

    metrics_path = report_dir / "metrics.json"
    hio.write_json(metrics_path, report.to_dict())
    plot_paths = render_report_plots(report, report_dir)
    cache.write(inputs, [metrics_path] + plot_paths)
    click.echo(f"evaluate: report -> {metrics_path}")


@main.command()
@_common_options
def experiment(config_path, out, seed, jobs) -> None:
    """Run every configured table row end to end and write the summary table."""
    cfg = _load_config(config_path, out, seed)
    run_dir = cfg.output_dir / "experiment"
    cache = StageCache(cfg, "experiment", run_dir)
    if cache.is_fresh([]):
        click.echo(f"[cached] experiment: {run_dir}")
        return

    dataset, truth = generate_population(cfg.scenario)
    records = label_cohort(dataset, cfg.label_params)
    base_plan = cfg.plan_for_row(0)

    def run_row(row_index: int):
        plan = cfg.plan_for_row(row_index)
        return run_experiment(plan, dataset, records)

    indices = list(range(len(cfg.rows)))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(run_row, indices))
    else:
        reports = [run_row(i) for i in indices]

    outputs = []
    keyed = {}
    for row_index, report in zip(indices, reports):
        target, strategy = cfg.rows[row_index]
        key = f"{target}__{strategy}"
        keyed[key] = report
        row_dir = run_dir / f"row{row_index}_{target.lower()}_{strategy}"
        metrics_path = row_dir / "metrics.json"
        hio.write_json(metrics_path, report.to_dict())
        outputs.append(metrics_path)
        outputs += render_report_plots(report, row_dir)
        for split_id, model in sorted(getattr(report, "models", {}).items()):
            model_path = row_dir / f"model_split{split_id}.json"
            save_model(model_path, model)
            outputs.append(model_path)

    table = summary_table(keyed)
    table_path = run_dir / "summary_table.txt"
    table_path.parent.mkdir(parents=True, exist_ok=True)
    table_path.write_text(table, encoding="utf-8")
    outputs.append(table_path)
    config_copy = run_dir / "config_used.json"
    hio.write_json(config_copy, {"config": cfg.raw, "seed": cfg.seed, "rows": [list(r) for r in cfg.rows]})
    outputs.append(config_copy)
    cache.write([], outputs)
    click.echo(table)
    click.echo(f"experiment: reports -> {run_dir}")


if __name__ == "__main__":
    main()
