import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone
from sklearn.pipeline import make_pipeline

from hallguard.ensemble import (
    EnsembleModel, GbdtConfig, GradientBoostedTreeClassifier, MaxF1, PrecisionAtLeast, ThresholdUnachievable,
    Tree, calibrate_threshold, log_loss, logistic_grad_hess, predict, threshold_from_scores, train,
)
from oracles import best_threshold_scan, brute_force_stump, finite_difference_grad_hess, logistic_loss, sigmoid


def random_set(seed, n=50, d=4):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = (X[:, 0] + 0.5 * X[:, 2] + rng.normal(scale=0.7, size=n) > 0).astype(int)
    return X, y


PROBE_SCORES = train(*random_set(10, n=200)).predict_proba(random_set(17, n=300)[0])


class TestGradients:
    def test_against_finite_differences(self):
        rng = np.random.default_rng(0)
        raw = rng.uniform(-6, 6, size=100)
        y = rng.integers(0, 2, size=100).astype(float)
        g, h = logistic_grad_hess(raw, y)
        for i in range(100):
            fg, fh = finite_difference_grad_hess(raw[i], y[i])
            assert abs(g[i] - fg) < 1e-6 and abs(h[i] - fh) < 1e-6

    def test_log_loss_matches_reference(self):
        raw, y = np.array([-3.0, 0.0, 40.0]), np.array([1.0, 0.0, 1.0])
        expected = np.mean([logistic_loss(r, t) for r, t in zip(raw, y)])
        assert log_loss(y, raw) == pytest.approx(expected, abs=1e-12)


class TestTrain:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    @pytest.mark.parametrize("min_leaf", [1, 5])
    def test_first_stump_matches_brute_force(self, seed, min_leaf):
        X, y = random_set(seed)
        cfg = GbdtConfig(rounds=1, max_depth=1, min_samples_leaf=min_leaf, l2_regularization=1.0)
        model = train(X, y, cfg)
        p = sigmoid(model.base_score)
        g, h = p - y, np.full(len(y), p * (1 - p))
        gain, f, t, lv, rv = brute_force_stump(X, g, h, 1.0, min_leaf)
        tree = model.trees[0]
        assert (tree.feature[0], tree.threshold[0]) == (f, t)
        assert abs(tree.value[tree.left[0]] - lv) < 1e-9
        assert abs(tree.value[tree.right[0]] - rv) < 1e-9

    def test_single_class(self):
        X = np.random.default_rng(0).normal(size=(10, 3))
        model = train(X, np.ones(10))
        assert model.trees == () and model.predict_proba(X) == pytest.approx(1.0, abs=1e-5)
        assert model.base_score == pytest.approx(np.log((1 - 1e-6) / 1e-6))

    def test_separable_loss_strictly_decreases(self):
        x = np.arange(20, dtype=float).reshape(-1, 1)
        y = (x[:, 0] >= 10).astype(int)
        model = train(x, y, GbdtConfig(rounds=30, max_depth=1, min_samples_leaf=1))
        losses = [log_loss(y, raw) for raw in model.staged_decision_function(x)]
        assert all(b < a for a, b in zip(losses, losses[1:]))
        proba = model.predict_proba(x)
        assert ((proba >= 0.5) == (y == 1)).all()

    @pytest.mark.parametrize("seed", [3, 4, 5])
    def test_loss_non_increasing(self, seed):
        X, y = random_set(seed, n=120, d=5)
        model = train(X, y, GbdtConfig(rounds=50))
        losses = [log_loss(y, raw) for raw in model.staged_decision_function(X)]
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))

    def test_deterministic(self):
        X, y = random_set(7)
        assert train(X, y, seed=1).to_json() == train(X, y, seed=1).to_json()

    def test_max_depth_respected(self):
        X, y = random_set(8, n=200)
        assert all(t.depth() <= 2 for t in train(X, y, GbdtConfig(max_depth=2)).trees)

    @pytest.mark.parametrize("bad", [dict(rounds=-1), dict(max_depth=0), dict(learning_rate=0),
                                     dict(min_samples_leaf=0), dict(l2_regularization=-1)])
    def test_config_validation(self, bad):
        with pytest.raises(ValueError):
            GbdtConfig(**bad)


class TestPredict:
    def test_zero_tree_model(self):
        model = EnsembleModel(0.0, (), 0.1, ("a", "b"), GbdtConfig())
        assert predict(model, np.array([3.0, -1.0])) == 0.5

    def test_stump_left_path(self):
        stump = Tree((0, -1, -1), (1.0, 0.0, 0.0), (1, -1, -1), (2, -1, -1), (0.0, -2.0, 3.0))
        model = EnsembleModel(0.25, (stump,), 0.1, ("a",), GbdtConfig())
        assert predict(model, np.array([0.5])) == pytest.approx(sigmoid(0.25 + 0.1 * -2.0), abs=1e-15)
        assert predict(model, np.array([1.0])) == pytest.approx(sigmoid(0.25 + 0.1 * 3.0), abs=1e-15)

    def test_dimension_mismatch(self):
        model = EnsembleModel(0.0, (), 0.1, ("a", "b"), GbdtConfig())
        with pytest.raises(ValueError):
            predict(model, np.zeros(3))


class TestCalibration:
    def test_separated_scores(self):
        scores, labels = [0.1, 0.2, 0.3, 0.7, 0.8], [0, 0, 0, 1, 1]
        t = threshold_from_scores(scores, labels, MaxF1())
        assert 0.3 < t < 0.7

    def test_unachievable_precision(self):
        with pytest.raises(ThresholdUnachievable):
            threshold_from_scores([0.9, 0.5, 0.1], [0, 1, 1], PrecisionAtLeast(1.0))

    def test_needs_both_classes(self):
        with pytest.raises(ValueError):
            threshold_from_scores([0.1, 0.2], [1, 1])

    @settings(max_examples=200)
    @given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 1)), min_size=2, max_size=10),
           st.sampled_from([0.5, 0.6, 0.8, 1.0]))
    def test_matches_exhaustive_scan(self, pairs, p):
        scores = [s / 20 for s, _ in pairs]
        labels = [y for _, y in pairs]
        if len(set(labels)) < 2:
            return
        def flagged(t):
            return [s >= t for s in scores]

        t = threshold_from_scores(scores, labels, MaxF1())
        assert flagged(t) == flagged(best_threshold_scan(scores, labels, "f1"))
        oracle = best_threshold_scan(scores, labels, "precision", p)
        if oracle is None:
            with pytest.raises(ThresholdUnachievable):
                threshold_from_scores(scores, labels, PrecisionAtLeast(p))
        else:
            assert flagged(threshold_from_scores(scores, labels, PrecisionAtLeast(p))) == flagged(oracle)

    def test_mixed_fixture_of_ten(self):
        scores = [0.05, 0.1, 0.2, 0.35, 0.4, 0.55, 0.6, 0.7, 0.85, 0.9]
        labels = [0, 0, 1, 0, 1, 0, 1, 1, 0, 1]
        oracle = best_threshold_scan(scores, labels, "f1")
        t = threshold_from_scores(scores, labels, MaxF1())
        assert [s >= t for s in scores] == [s >= oracle for s in scores]

    def test_calibrate_uses_model_scores(self):
        X, y = random_set(9, n=80)
        model = train(X, y)
        assert calibrate_threshold(model, X, y) == threshold_from_scores(model.predict_proba(X), y)

    @given(st.floats(0, 1), st.floats(0, 1))
    def test_threshold_monotonicity(self, a, b):
        lo, hi = min(a, b), max(a, b)
        assert (PROBE_SCORES >= hi).sum() <= (PROBE_SCORES >= lo).sum()


class TestSerialization:
    def test_round_trip_bit_identical(self, tmp_path):
        X, y = random_set(11, n=150, d=4)
        model = train(X, y, GbdtConfig(rounds=20)).with_thresholds(detection=0.4, verification=0.6)
        path = tmp_path / "m.json"
        model.save(path)
        loaded = EnsembleModel.load(path)
        probe = np.random.default_rng(1).normal(size=(1000, 4)) * 3
        assert np.array_equal(model.predict_proba(probe), loaded.predict_proba(probe))
        assert loaded.thresholds == model.thresholds and loaded.model_hash == model.model_hash

    def test_rejects_tampered_config(self):
        X, y = random_set(12)
        d = json.loads(train(X, y).to_json())
        d["config"]["max_depth"] = 7
        with pytest.raises(ValueError):
            EnsembleModel.from_dict(d)

    def test_rejects_unknown_format(self):
        d = json.loads(train(*random_set(13)).to_json())
        d["format"] = "other"
        with pytest.raises(ValueError):
            EnsembleModel.from_dict(d)


class TestEstimator:
    def test_fit_predict(self):
        X, y = random_set(14, n=200)
        clf = GradientBoostedTreeClassifier(rounds=30).fit(X, y)
        assert clf.score(X, y) > 0.8
        assert clf.predict_proba(X).shape == (200, 2)
        assert clf.get_params()["rounds"] == 30

    def test_clone_and_pipeline(self):
        from sklearn.preprocessing import StandardScaler

        X, y = random_set(15, n=100)
        pipe = make_pipeline(StandardScaler(), clone(GradientBoostedTreeClassifier(rounds=10)))
        assert pipe.fit(X, y).predict(X).shape == (100,)

    def test_string_labels(self):
        X, y = random_set(16, n=60)
        labels = np.where(y == 1, "hallucinated", "faithful")
        clf = GradientBoostedTreeClassifier(rounds=5).fit(X, labels)
        assert set(clf.predict(X)) <= {"hallucinated", "faithful"}

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            GradientBoostedTreeClassifier().predict(np.zeros((1, 2)))

    def test_rejects_multiclass(self):
        with pytest.raises(ValueError):
            GradientBoostedTreeClassifier().fit(np.zeros((3, 1)), [0, 1, 2])
