import json

import numpy as np
import pytest

from haipred.ehr import ClinicalEvent, ValidatedDataset, validate_dataset
from haipred.experiment import (
    BALANCED,
    GAUSSIAN,
    ExperimentPlan,
    run_experiment,
    run_table,
    summary_table,
)
from haipred.featurize import feature_order, featurize_stays
from haipred.gbdt import HyperparameterGrid
from haipred.labeling import label_cohort
from haipred.synthgen import NoiseRates, ScenarioConfig, generate_population

SMALL_GRID = HyperparameterGrid(max_depth=(3,), n_rounds=(25,), learning_rate=(0.3,))


def small_plan(**kwargs):
    defaults = dict(
        model_target="IRI",
        missingness_strategy=GAUSSIAN,
        n_repeats=3,
        base_seed=5,
        grid=SMALL_GRID,
    )
    defaults.update(kwargs)
    return ExperimentPlan(**defaults)


@pytest.fixture(scope="module")
def scenario_population():
    cfg = ScenarioConfig(
        n_patients=350,
        rng_seed=21,
        missingness_rates={
            "temperature": {"case": 0.1, "control": 0.5},
            "wbc": {"case": 0.1, "control": 0.5},
        },
        ventilated_missingness_rates={
            "temperature": {"case": 0.3, "control": 0.3},
            "wbc": {"case": 0.3, "control": 0.3},
        },
    )
    dataset, truth = generate_population(cfg)
    return dataset, truth, label_cohort(dataset)


class TestRunExperiment:
    def test_report_structure_and_aggregates(self, scenario_population):
        dataset, _, labels = scenario_population
        report = run_experiment(small_plan(), dataset, labels)
        ok = report.successful
        assert len(ok) >= 3
        agg = report.aggregate
        for key in ("train_auc", "validation_auc", "test_auc"):
            values = [getattr(s, f"auc_{key.split('_')[0]}") for s in ok]
            assert agg[key]["mean"] == pytest.approx(float(np.mean(values)))
            if len(values) > 1:
                assert agg[key]["std"] == pytest.approx(float(np.std(values, ddof=1)))
        payload = report.to_dict()
        assert json.dumps(payload, sort_keys=True)

    def test_determinism_byte_identical_json(self, scenario_population):
        dataset, _, labels = scenario_population
        a = run_experiment(small_plan(), dataset, labels)
        b = run_experiment(small_plan(), dataset, labels)
        text_a = json.dumps(a.to_dict(), sort_keys=True)
        text_b = json.dumps(b.to_dict(), sort_keys=True)
        assert text_a == text_b

    def test_null_infection_scenario_records_failures(self):
        cfg = ScenarioConfig(
            n_patients=120, infection_rates={}, rng_seed=3,
            noise=NoiseRates(0.1, 0, 0, 0, 0, 0.1, 0),
        )
        dataset, _ = generate_population(cfg)
        report = run_experiment(small_plan(n_repeats=3), dataset)
        assert report.successful == []
        assert report.aggregate.get("unavailable") is True
        assert all(s.error for s in report.splits)
        payload = report.to_dict()
        assert len(payload["failures"]) == 3

    def test_vap_plan_applies_los_matching_by_default(self):
        assert ExperimentPlan("VAP", GAUSSIAN).los_matching_enabled
        assert not ExperimentPlan("IRI", GAUSSIAN).los_matching_enabled
        assert ExperimentPlan("IRI", GAUSSIAN, apply_los_matching=True).los_matching_enabled

    def test_balanced_strategy_runs(self, scenario_population):
        dataset, _, labels = scenario_population
        report = run_experiment(small_plan(missingness_strategy=BALANCED), dataset, labels)
        assert report.successful

    def test_cross_label_entries_present(self, scenario_population):
        dataset, _, labels = scenario_population
        report = run_experiment(small_plan(), dataset, labels)
        for outcome in report.successful:
            assert set(outcome.test_auc_by_label) == {"IRI", "VAP"}

    def test_invalid_plan_rejected(self):
        with pytest.raises(ValueError):
            ExperimentPlan("XYZ", GAUSSIAN)
        with pytest.raises(ValueError):
            ExperimentPlan("IRI", "impute_zeros")


class TestLeakage:
    def test_future_events_change_nothing(self, scenario_population):
        dataset, _, labels = scenario_population
        labels_by_stay = {r.stay_id: r for r in labels}
        stay_ids = [s.stay_id for s in dataset.stays[:120]]
        baseline = featurize_stays(dataset, labels_by_stay, stay_ids, "IRI", master_seed=9)

        pred_time = {fv.stay_id: fv.prediction_time for fv in baseline.samples}
        injected = []
        for ev in dataset.clinical_events:
            injected.append(ev)
        for sid, t in pred_time.items():
            stay = dataset.stay(sid)
            when = min(t + 60, stay.discharge_time)
            if when <= t:
                continue
            injected.append(ClinicalEvent(sid, when, "vital", "temperature", 41.5, "degC"))
        tampered = validate_dataset(
            dataset.stays, injected, dataset.medications, dataset.cultures, dataset.diagnoses
        )
        assert tampered.total_rejections == 0
        after = featurize_stays(tampered, labels_by_stay, stay_ids, "IRI", master_seed=9)

        def canonical(result):
            return json.dumps(
                [
                    {
                        "sample_id": fv.sample_id,
                        "t": fv.prediction_time,
                        "values": fv.values,
                        "mask": fv.missing_mask,
                    }
                    for fv in result.samples
                ],
                sort_keys=True,
            )

        assert canonical(after) == canonical(baseline)

    def test_experiment_unchanged_by_future_test_events(self, scenario_population):
        dataset, _, labels = scenario_population
        report_before = run_experiment(small_plan(n_repeats=3), dataset, labels)

        # append a late event to every stay: after every possible prediction
        # time of that stay (discharge is always >= prediction_time + gap)
        extra = [
            ClinicalEvent(s.stay_id, s.discharge_time, "vital", "temperature", 41.9, "degC")
            for s in dataset.stays
        ]
        tampered = validate_dataset(
            dataset.stays,
            list(dataset.clinical_events) + extra,
            dataset.medications,
            dataset.cultures,
            dataset.diagnoses,
        )
        report_after = run_experiment(small_plan(n_repeats=3), tampered, labels)
        a = json.dumps(report_before.to_dict(), sort_keys=True)
        b = json.dumps(report_after.to_dict(), sort_keys=True)
        assert a == b


class TestTableRunner:
    def test_four_rows_and_summary(self, scenario_population):
        dataset, _, labels = scenario_population
        reports = run_table(small_plan(n_repeats=3), dataset, labels)
        assert set(reports) == {
            "IRI__gaussian_impute",
            "IRI__balance_missingness",
            "VAP__gaussian_impute",
            "VAP__balance_missingness",
        }
        table = summary_table(reports)
        assert "IRI with gaussian imputation" in table
        assert "VAP with balanced missingness" in table
        assert table.count("+/-") >= 6
