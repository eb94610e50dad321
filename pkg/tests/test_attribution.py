import numpy as np
import pytest

from haipred.attribution import (
    attribution_summary,
    tree_attribution,
    tree_expected_value,
    tree_shap_single,
)
from haipred.gbdt import GBDTModel, Hyperparams, TreeNode, train

from oracles import brute_force_shap, conditional_expectation


def leaf(weight, cover):
    return TreeNode(cover=cover, weight=weight)


def split(feature, threshold, left, right, default_left=True):
    node = TreeNode(cover=left.cover + right.cover)
    node.feature = feature
    node.threshold = threshold
    node.default_left = default_left
    node.left = left
    node.right = right
    return node


def training_data(n=250, d=5, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    X[rng.random(X.shape) < 0.15] = np.nan
    logits = 1.5 * np.nan_to_num(X[:, 0]) - 1.0 * np.nan_to_num(X[:, 1]) + 0.5 * np.nan_to_num(X[:, 2])
    y = (logits + rng.normal(0, 0.5, n) > 0).astype(int)
    return X, y


class TestSingleTrees:
    def test_empty_ensemble_contributions_zero(self):
        model = GBDTModel([], base_score=-0.4, learning_rate=0.3,
                          feature_names=["a", "b"], hyperparams=Hyperparams())
        contribs, base = tree_attribution(model, [1.0, 2.0])
        assert np.array_equal(contribs, np.zeros(2))
        assert base == -0.4

    def test_single_stump_attributes_only_its_feature(self):
        stump = split(0, 0.5, leaf(1.0, 3), leaf(-2.0, 7))
        phi = tree_shap_single(stump, np.array([0.0, 99.0]), 2)
        assert phi[1] == 0.0
        # stump value minus cover-weighted mean
        expected = 1.0 - (3 * 1.0 + 7 * -2.0) / 10
        assert phi[0] == pytest.approx(expected)

    def test_depth_two_fixture_matches_brute_force(self):
        tree = split(
            0, 0.0,
            split(1, 0.0, leaf(1.0, 2), leaf(2.0, 3)),
            split(1, 1.0, leaf(-1.0, 4), leaf(3.0, 1)),
        )
        x = np.array([-0.5, 0.5])
        phi = tree_shap_single(tree, x, 2)
        ref = brute_force_shap(tree, x, 2)
        assert np.allclose(phi, ref, atol=1e-12)

    def test_repeated_feature_on_path(self):
        tree = split(0, 0.0, split(0, -1.0, leaf(1.0, 2), leaf(2.0, 3)), leaf(-1.0, 5))
        for value in (-2.0, -0.5, 1.0, np.nan):
            x = np.array([value])
            phi = tree_shap_single(tree, x, 1)
            ref = brute_force_shap(tree, x, 1)
            assert np.allclose(phi, ref, atol=1e-12)

    @pytest.mark.parametrize("seed", range(15))
    def test_random_depth3_trees_match_brute_force(self, seed):
        rng = np.random.default_rng(seed)

        def random_tree(depth, cover):
            if depth == 0 or cover < 4 or rng.random() < 0.3:
                return leaf(float(rng.normal()), cover)
            lc = int(rng.integers(1, cover))
            return split(
                int(rng.integers(0, 4)),
                float(rng.normal()),
                random_tree(depth - 1, lc),
                random_tree(depth - 1, cover - lc),
                default_left=bool(rng.random() < 0.5),
            )

        tree = random_tree(3, int(rng.integers(8, 40)))
        x = rng.normal(size=4)
        if rng.random() < 0.5:
            x[int(rng.integers(0, 4))] = np.nan
        assert np.allclose(
            tree_shap_single(tree, x, 4), brute_force_shap(tree, x, 4), atol=1e-9
        )


class TestTrainedModels:
    def test_additivity_on_200_sample_batch(self):
        X, y = training_data(n=250)
        model = train(X, y, Hyperparams(max_depth=4, n_rounds=25, learning_rate=0.3))
        margins = model.predict_margin(X[:200])
        for i in range(200):
            contribs, base = tree_attribution(model, X[i])
            assert abs(contribs.sum() + base - margins[i]) < 1e-6

    def test_depth3_trained_trees_match_brute_force(self):
        X, y = training_data(n=120, d=4, seed=3)
        model = train(X, y, Hyperparams(max_depth=3, n_rounds=5, learning_rate=0.5))
        rng = np.random.default_rng(1)
        rows = rng.choice(len(X), size=10, replace=False)
        for tree in model.trees:
            for i in rows:
                assert np.allclose(
                    tree_shap_single(tree, X[i], 4),
                    brute_force_shap(tree, X[i], 4),
                    atol=1e-9,
                )

    def test_expected_value_matches_cover_weighted_mean(self):
        X, y = training_data(n=80, d=3, seed=4)
        model = train(X, y, Hyperparams(max_depth=3, n_rounds=3))
        for tree in model.trees:
            assert tree_expected_value(tree) == pytest.approx(
                conditional_expectation(tree, np.zeros(3), set()), abs=1e-12
            )

    def test_attribution_base_plus_contribs_equals_margin_with_missing(self):
        X, y = training_data(n=150, d=4, seed=5)
        model = train(X, y, Hyperparams(max_depth=4, n_rounds=10))
        x = X[0].copy()
        x[:] = np.nan
        contribs, base = tree_attribution(model, x)
        assert abs(contribs.sum() + base - model.predict_margin(x)[0]) < 1e-6

    def test_summary_shape_and_signal_ranking(self):
        X, y = training_data(n=300, d=5, seed=6)
        model = train(X, y, Hyperparams(max_depth=3, n_rounds=20))
        summary = attribution_summary(model, X[:100])
        assert set(summary) == set(model.feature_names)
        # the strongest planted signal carries the largest mean attribution
        assert summary["f0"] == max(summary.values())
