import numpy as np
import pytest

from haipred.ehr import PatientStay
from haipred.evaluate import cross_label_eval, route_model
from haipred.featurize import FeatureVector
from haipred.gbdt import GBDTModel, Hyperparams, TreeNode


def fv(sample_id, value, label_iri, label_vap):
    return FeatureVector(
        sample_id=sample_id,
        stay_id=sample_id,
        prediction_time=0,
        values={"x": value},
        missing_mask={"x": value is None},
        label_iri=label_iri,
        label_vap=label_vap,
    )


def constant_model(weight):
    stump = TreeNode(cover=2)
    stump.feature = 0
    stump.threshold = 1e9
    stump.left = TreeNode(cover=1, weight=weight)
    stump.right = TreeNode(cover=1, weight=weight)
    return GBDTModel([stump], 0.0, 1.0, ["x"], Hyperparams())


class TestCrossLabelEval:
    def test_identical_labels_identical_auc(self):
        rng = np.random.default_rng(0)
        samples = []
        scores = []
        for i in range(50):
            y = bool(rng.integers(0, 2))
            samples.append(fv(f"s{i}", 0.0, y, y))
            scores.append(rng.random() + y)
        auc_iri, _ = cross_label_eval(scores, samples, "IRI")
        auc_vap, _ = cross_label_eval(scores, samples, "VAP")
        assert auc_iri == auc_vap

    def test_labels_independent_of_scores_auc_near_half(self):
        rng = np.random.default_rng(1)
        n = 1000
        samples = [
            fv(f"s{i}", 0.0, bool(rng.integers(0, 2)), bool(rng.integers(0, 2)))
            for i in range(n)
        ]
        scores = rng.random(n)
        auc_iri, _ = cross_label_eval(scores, samples, "IRI")
        assert abs(auc_iri - 0.5) < 0.05

    def test_divergent_labels_divergent_auc(self):
        rng = np.random.default_rng(2)
        samples, scores = [], []
        for i in range(400):
            vap = bool(rng.integers(0, 2))
            iri = bool(rng.integers(0, 2))
            samples.append(fv(f"s{i}", 0.0, iri, vap))
            scores.append(2.0 * vap + rng.normal(0, 0.5))
        auc_vap, _ = cross_label_eval(scores, samples, "VAP")
        auc_iri, _ = cross_label_eval(scores, samples, "IRI")
        assert auc_vap > auc_iri

    def test_single_class_under_chosen_labels_errors(self):
        samples = [fv("a", 0.0, True, True), fv("b", 0.0, True, False)]
        with pytest.raises(ValueError):
            cross_label_eval([0.5, 0.5], samples, "IRI")


class TestRouting:
    def _stay(self, ventilated):
        return PatientStay(
            stay_id="s",
            patient_id="p",
            age_years=60,
            icu_admit_time=0,
            discharge_time=6000,
            intubation_time=100 if ventilated else None,
            mechanically_ventilated=ventilated,
        )

    def test_ventilated_uses_vap_model(self):
        iri_model = constant_model(-2.0)
        vap_model = constant_model(2.0)
        prob, tag = route_model(
            self._stay(True), iri_model, vap_model, fv("s", 0.0, False, False), ["x"]
        )
        assert tag == "VAP"
        assert prob == pytest.approx(vap_model.predict(np.array([[0.0]]))[0])

    def test_non_ventilated_uses_iri_model(self):
        iri_model = constant_model(-2.0)
        vap_model = constant_model(2.0)
        prob, tag = route_model(
            self._stay(False), iri_model, vap_model, fv("s", 0.0, False, False), ["x"]
        )
        assert tag == "IRI"
        assert prob == pytest.approx(iri_model.predict(np.array([[0.0]]))[0])
