"""Feature pipeline laws and learner sanity: separable data, XOR, score
ranges, SMOTE geometry, determinism."""

import numpy as np
import pytest

from slowave.errors import ModelError
from slowave.shallow import MODEL_KINDS, ShallowModel, fit, prepare_training
from slowave.shallow.pipeline import smote, standardize, variance_filter


def two_clusters(n=100, sigma=0.1, seed=0):
    rng = np.random.default_rng(seed)
    half = n // 2
    X = np.vstack(
        [
            rng.normal(-3.0, sigma, (half, 2)),
            rng.normal(3.0, sigma, (n - half, 2)),
        ]
    )
    y = np.concatenate([np.zeros(half, int), np.ones(n - half, int)])
    return X, y


def xor_clusters(n_per=50, sigma=0.1, seed=1):
    rng = np.random.default_rng(seed)
    centers = [(-2, -2, 0), (2, 2, 0), (-2, 2, 1), (2, -2, 1)]
    X, y = [], []
    for cx, cy, label in centers:
        X.append(rng.normal((cx, cy), sigma, (n_per, 2)))
        y.append(np.full(n_per, label, int))
    return np.vstack(X), np.concatenate(y)


def training_bac(model, X, y):
    pred = (model.predict_score(X) > 0.5).astype(int)
    sen = np.mean(pred[y == 1] == 1)
    spe = np.mean(pred[y == 0] == 0)
    return (sen + spe) / 2


class TestVarianceFilter:
    def test_constant_column_removed(self):
        X = np.column_stack([np.full(10, 3.0), np.arange(10.0)])
        mask = variance_filter(X)
        assert mask.tolist() == [False, True]

    def test_unit_std_kept(self):
        rng = np.random.default_rng(0)
        X = rng.normal(0, 1.0, (50, 1))
        assert variance_filter(X).tolist() == [True]

    def test_mixed(self):
        rng = np.random.default_rng(1)
        X = np.column_stack([np.zeros(40), rng.normal(0, 0.5, 40)])
        assert variance_filter(X).tolist() == [False, True]

    def test_all_removed_is_error(self):
        with pytest.raises(ModelError):
            variance_filter(np.ones((5, 3)))


class TestStandardize:
    def test_population_std_convention(self):
        Xs, mu, sigma = standardize(np.array([[1.0], [2.0], [3.0]]))
        expected = np.array([-1.2247448713915890, 0.0, 1.2247448713915890])
        assert np.allclose(Xs[:, 0], expected, atol=1e-12)
        assert mu[0] == 2.0

    def test_idempotent(self):
        rng = np.random.default_rng(2)
        X = rng.normal(5.0, 2.0, (100, 3))
        X1, _, _ = standardize(X)
        X2, mu2, sigma2 = standardize(X1)
        assert np.allclose(X2, X1, atol=1e-9)
        assert np.allclose(mu2, 0.0, atol=1e-9)
        assert np.allclose(sigma2, 1.0, atol=1e-9)

    def test_row_at_mean_maps_to_zero(self):
        from slowave.shallow.pipeline import apply_standardize

        X = np.array([[1.0, 10.0], [3.0, 30.0]])
        _, mu, sigma = standardize(X)
        assert np.allclose(apply_standardize(mu[None, :], mu, sigma), 0.0)


class TestSmote:
    def test_balanced_unchanged(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(20, 2))
        y = np.array([0, 1] * 10)
        Xb, yb = smote(X, y, seed=0)
        assert np.array_equal(Xb, X)
        assert np.array_equal(yb, y)

    def test_identical_minority_points(self):
        X = np.vstack([np.zeros((2, 2)) + 7.0, np.random.default_rng(4).normal(size=(8, 2))])
        y = np.array([1, 1] + [0] * 8)
        Xb, yb = smote(X, y, seed=0)
        assert np.bincount(yb).tolist() == [8, 8]
        assert np.allclose(Xb[10:], 7.0)

    def test_convex_combination_property(self):
        rng = np.random.default_rng(5)
        X = np.vstack([rng.normal(0, 1, (12, 3)), rng.normal(4, 1, (40, 3))])
        y = np.array([1] * 12 + [0] * 40)
        Xb, yb = smote(X, y, seed=9)
        minority = X[:12]
        synthetic = Xb[52:]
        assert synthetic.shape[0] == 28
        for s in synthetic:
            # s must sit on a segment between two real minority points.
            best = np.inf
            for i in range(12):
                for j in range(12):
                    if i == j:
                        continue
                    d = minority[j] - minority[i]
                    denom = float(d @ d)
                    if denom == 0:
                        dist = np.linalg.norm(s - minority[i])
                    else:
                        u = float((s - minority[i]) @ d) / denom
                        if not -1e-9 <= u <= 1 + 1e-9:
                            continue
                        dist = np.linalg.norm(s - (minority[i] + u * d))
                    best = min(best, dist)
            assert best < 1e-9

    def test_minority_too_small(self):
        X = np.vstack([np.zeros((1, 2)), np.ones((5, 2))])
        y = np.array([1, 0, 0, 0, 0, 0])
        with pytest.raises(ModelError):
            smote(X, y, seed=0)

    def test_deterministic(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(30, 4))
        y = np.array([1] * 10 + [0] * 20)
        a = smote(X, y, seed=42)
        b = smote(X, y, seed=42)
        assert np.array_equal(a[0], b[0])


class TestPipelineOrder:
    def test_smote_sees_standardized_data(self):
        rng = np.random.default_rng(7)
        # Minority cluster far from the origin in raw units.
        X = np.vstack([rng.normal(1000.0, 5.0, (10, 2)), rng.normal(0.0, 5.0, (30, 2))])
        y = np.array([1] * 10 + [0] * 30)
        X_train, y_train, mask, mu, sigma = prepare_training(X, y, seed=0)
        assert np.bincount(y_train).tolist() == [30, 30]
        original = X_train[:40]
        assert np.allclose(original.mean(axis=0), 0.0, atol=1e-9)
        assert np.allclose(original.std(axis=0), 1.0, atol=1e-9)
        # Synthetic rows live in standardized space, between minority rows.
        synthetic = X_train[40:]
        lo = original[:10].min(axis=0) - 1e-9
        hi = original[:10].max(axis=0) + 1e-9
        assert np.all(synthetic >= lo) and np.all(synthetic <= hi)

    def test_single_class_rejected(self):
        X = np.random.default_rng(8).normal(size=(10, 2))
        with pytest.raises(ModelError, match="single class"):
            prepare_training(X, np.zeros(10, int), seed=0)

    def test_non_finite_rejected(self):
        X = np.ones((4, 2))
        X[0, 0] = np.nan
        with pytest.raises(ModelError, match="non-finite"):
            prepare_training(X, np.array([0, 1, 0, 1]), seed=0)


class TestLearners:
    @pytest.mark.parametrize("kind", MODEL_KINDS)
    def test_separable_clusters_perfect_bac(self, kind):
        X, y = two_clusters()
        model = fit(kind, X, y, seed=0)
        assert training_bac(model, X, y) == 1.0

    @pytest.mark.parametrize("kind", MODEL_KINDS)
    def test_scores_in_unit_interval(self, kind):
        X, y = two_clusters(n=60, sigma=2.5, seed=3)
        model = fit(kind, X, y, seed=0)
        probe = np.random.default_rng(4).normal(0, 10, (50, 2))
        scores = model.predict_score(probe)
        assert np.all(scores >= 0.0) and np.all(scores <= 1.0)

    def test_xor_separates_linear_from_trees(self):
        X, y = xor_clusters()
        bac_lr = training_bac(fit("lr", X, y, seed=0), X, y)
        bac_rf = training_bac(fit("rf", X, y, seed=0), X, y)
        bac_gb = training_bac(fit("gb", X, y, seed=0), X, y)
        assert bac_lr <= 0.75
        assert bac_rf >= 0.95
        assert bac_gb >= 0.95

    def test_single_class_error(self):
        X = np.random.default_rng(9).normal(size=(20, 2))
        with pytest.raises(ModelError):
            fit("lr", X, np.ones(20, int), seed=0)

    @pytest.mark.parametrize("kind", MODEL_KINDS)
    def test_seed_determinism(self, kind):
        X, y = two_clusters(n=50, sigma=1.5, seed=5)
        probe = np.random.default_rng(10).normal(size=(20, 2))
        s1 = fit(kind, X, y, seed=7).predict_score(probe)
        s2 = fit(kind, X, y, seed=7).predict_score(probe)
        assert np.array_equal(s1, s2)

    def test_imbalanced_training_balances_via_smote(self):
        rng = np.random.default_rng(11)
        X = np.vstack([rng.normal(-2, 0.5, (12, 2)), rng.normal(2, 0.5, (48, 2))])
        y = np.array([1] * 12 + [0] * 48)
        model = fit("lr", X, y, seed=0)
        assert training_bac(model, X, y) == 1.0


class TestSerialization:
    @pytest.mark.parametrize("kind", MODEL_KINDS)
    def test_round_trip_scores_identical(self, kind):
        X, y = two_clusters(n=40, sigma=1.0, seed=12)
        model = fit(kind, X, y, seed=1)
        doc = model.to_json_dict()
        import json

        restored = ShallowModel.from_json_dict(json.loads(json.dumps(doc)))
        probe = np.random.default_rng(13).normal(size=(25, 2))
        assert np.allclose(model.predict_score(probe), restored.predict_score(probe), atol=1e-12)

    def test_version_checked(self):
        X, y = two_clusters(n=30)
        doc = fit("lr", X, y, seed=0).to_json_dict()
        doc["version"] = 99
        with pytest.raises(ModelError):
            ShallowModel.from_json_dict(doc)
