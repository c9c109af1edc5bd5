import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from synthlong import features
from synthlong.errors import InvalidArgument, NumericalFailure, UnsupportedVersion
from synthlong.features import FeatureSpec, block_mean, featurize, fit_feature_spec, ridge_solve
from synthlong.predictor import (PredictorModel, load_model, model_from_json, model_to_json,
                                 predict, save_model, select_lambda, train)


def random_images(rng, n, size=32):
    return rng.uniform(size=(n, size, size))


class TestFeatures:
    def test_block_mean_example(self):
        img = np.arange(16.0).reshape(4, 4)
        np.testing.assert_array_equal(block_mean(img, 2), [[2.5, 4.5], [10.5, 12.5]])

    def test_block_mean_indivisible(self):
        with pytest.raises(InvalidArgument):
            block_mean(np.zeros((6, 6)), 4)

    def test_standardized(self, rng):
        imgs = random_images(rng, 200)
        X = featurize(imgs, fit_feature_spec(imgs))
        np.testing.assert_allclose(X.mean(axis=0), 0, atol=1e-12)
        np.testing.assert_allclose(X.std(axis=0), 1, atol=1e-12)

    def test_constant_feature_dropped(self, rng):
        imgs = random_images(rng, 50, 8)
        imgs[:, :4, :4] = 0.3
        spec = fit_feature_spec(imgs)
        assert spec.n_dropped == 1 and spec.n_features == 3

    def test_unfitted(self):
        with pytest.raises(InvalidArgument):
            FeatureSpec().n_features


class TestRidgeSolve:
    def test_normal_equations(self, rng):
        X = rng.normal(size=(500, 64))
        X -= X.mean(axis=0)
        T = rng.normal(size=(500, 3))
        lam = 0.7
        W, b = ridge_solve(X, T, lam)
        resid = (X.T @ X + lam * np.eye(64)) @ W - X.T @ (T - T.mean(axis=0))
        assert np.max(np.abs(resid)) < 1e-6
        np.testing.assert_allclose(b, T.mean(axis=0))

    def test_lstsq_agreement(self, rng):
        X = rng.normal(size=(300, 10))
        X -= X.mean(axis=0)
        T = rng.normal(size=300)
        W, b = ridge_solve(X, T, 0.0)
        ref = np.linalg.lstsq(X, T - T.mean(), rcond=None)[0]
        np.testing.assert_allclose(W[:, 0], ref, atol=1e-10)

    def test_singular_names_lambda(self, rng):
        X = rng.normal(size=(5, 20))
        with pytest.raises(NumericalFailure, match="lambda"):
            ridge_solve(X - X.mean(axis=0), rng.normal(size=5), 0.0)

    def test_negative_lambda(self, rng):
        with pytest.raises(InvalidArgument):
            ridge_solve(np.zeros((3, 2)), np.zeros(3), -1.0)


class TestTrain:
    def test_exact_interpolation(self, rng):
        imgs = random_images(rng, 300, 16)
        X = features.raw_features(imgs, 4)
        beta = rng.normal(size=(16, 2))
        T = X @ beta + np.array([0.5, -1.0])
        m = train(imgs, T, lam=0.0)
        np.testing.assert_allclose(predict(m, imgs), T, atol=1e-9)

    def test_strong_ridge_predicts_mean(self, rng):
        imgs = random_images(rng, 100)
        T = rng.normal(size=(100, 3))
        m = train(imgs, T, lam=1e12)
        np.testing.assert_allclose(predict(m, imgs), np.broadcast_to(T.mean(axis=0), T.shape),
                                   atol=1e-8)

    def test_training_mse_monotone_in_lambda(self, rng):
        imgs = random_images(rng, 200)
        T = rng.normal(size=(200, 3))
        spec = fit_feature_spec(imgs)
        mses = [np.mean((predict(train(imgs, T, lam, spec), imgs) - T) ** 2)
                for lam in (0.0, 0.01, 0.1, 1, 10, 100, 1e4)]
        assert all(b >= a - 1e-12 for a, b in zip(mses, mses[1:]))

    @given(st.floats(0, 1))
    def test_affine_in_image(self, t):
        rng = np.random.default_rng(5)
        imgs = random_images(rng, 80, 16)
        m = train(imgs, rng.normal(size=(80, 3)), lam=1.0)
        a, b = imgs[0], imgs[1]
        np.testing.assert_allclose(predict(m, t * a + (1 - t) * b),
                                   t * predict(m, a) + (1 - t) * predict(m, b), atol=1e-9)

    def test_single_and_stack(self, rng):
        imgs = random_images(rng, 80)
        m = train(imgs, rng.normal(size=(80, 3)))
        assert predict(m, imgs[3]).shape == (3,)
        np.testing.assert_allclose(predict(m, imgs[:5])[3], predict(m, imgs[3]))

    def test_mismatch(self, rng):
        with pytest.raises(InvalidArgument):
            train(random_images(rng, 10), np.zeros((9, 3)))

    def test_wrong_image_size(self, rng):
        m = train(random_images(rng, 80), rng.normal(size=(80, 3)))
        with pytest.raises(InvalidArgument):
            predict(m, np.zeros((16, 16)))

    def test_model_validation(self):
        spec = FeatureSpec()
        with pytest.raises(InvalidArgument):
            PredictorModel(np.zeros((3, 4)), np.zeros(2), 1.0, spec)
        with pytest.raises(InvalidArgument):
            PredictorModel(np.full((3, 4), np.nan), np.zeros(3), 1.0, spec)


class TestSelectLambda:
    def test_recovers_signal(self, rng):
        imgs = random_images(rng, 400)
        X = features.raw_features(imgs, 4)
        T = X[:, :3] * 10 + 0.01 * rng.normal(size=(400, 3))
        best, scores = select_lambda(imgs[:300], T[:300], imgs[300:], T[300:])
        assert best == min(scores, key=scores.get)
        assert best <= 1.0

    def test_tie_prefers_first(self, rng):
        imgs = random_images(rng, 120)
        T = np.ones((120, 2))
        best, scores = select_lambda(imgs[:100], T[:100], imgs[100:], T[100:], grid=(3.0, 1.0))
        assert scores[3.0] == scores[1.0] and best == 3.0

    def test_empty_grid(self, rng):
        imgs = random_images(rng, 10)
        with pytest.raises(InvalidArgument):
            select_lambda(imgs, np.zeros((10, 1)), imgs, np.zeros((10, 1)), grid=())


class TestModelFiles:
    def model(self, rng):
        imgs = random_images(rng, 100)
        return train(imgs, rng.normal(size=(100, 3)), lam=0.3, metadata={"sigma2": 9.0}), imgs

    def test_round_trip_exact(self, rng, tmp_path):
        m, imgs = self.model(rng)
        path = save_model(m, tmp_path / "m.json")
        m2 = load_model(path)
        np.testing.assert_array_equal(m2.weights, m.weights)
        np.testing.assert_array_equal(m2.bias, m.bias)
        np.testing.assert_array_equal(predict(m2, imgs), predict(m, imgs))
        assert m2.lam == 0.3 and m2.metadata["sigma2"] == 9.0
        assert not (tmp_path / "m.json.tmp").exists()

    def test_version_error(self, rng):
        m, _ = self.model(rng)
        doc = json.loads(model_to_json(m))
        doc["version"] = 99
        with pytest.raises(UnsupportedVersion):
            model_from_json(json.dumps(doc))

    def test_wrong_format(self):
        with pytest.raises(InvalidArgument):
            model_from_json(json.dumps({"format": "other", "version": 1}))
