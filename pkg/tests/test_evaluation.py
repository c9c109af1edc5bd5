import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from synthlong import evaluation as ev
from synthlong.errors import InvalidArgument, UndefinedMetric
from synthlong.evaluation import (LevelArtifacts, bootstrap_ci, build_report, fraction_of_max,
                                  mse, per_dim_r_squared, r_squared)
from synthlong.sampling import perturb_etas, sample_latents


class TestPointMetrics:
    def test_mse_example(self):
        assert mse([[1, 2], [3, 4]], [[1, 2], [3, 6]]) == 1.0

    def test_r2_perfect(self):
        a = np.arange(12.0).reshape(4, 3)
        assert r_squared(a, a) == 1.0

    def test_r2_mean_predictor_zero(self, rng):
        a = rng.normal(size=(50, 3))
        assert r_squared(a, np.broadcast_to(a.mean(axis=0), a.shape)) == pytest.approx(0.0, abs=1e-15)

    def test_r2_pooled_definition(self, rng):
        a, b = rng.normal(size=(2, 40, 3))
        ss_res = sum(np.sum((a[:, k] - b[:, k]) ** 2) for k in range(3))
        ss_tot = sum(np.sum((a[:, k] - a[:, k].mean()) ** 2) for k in range(3))
        assert r_squared(a, b) == pytest.approx(1 - ss_res / ss_tot, rel=1e-13)

    def test_r2_zero_variance(self):
        with pytest.raises(UndefinedMetric):
            r_squared(np.ones((5, 3)), np.zeros((5, 3)))

    def test_r2_one_row(self):
        with pytest.raises(InvalidArgument):
            r_squared(np.ones((1, 3)), np.ones((1, 3)))

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgument):
            mse(np.zeros((4, 3)), np.zeros((4, 2)))

    def test_per_dim(self, rng):
        a = rng.normal(size=(30, 3))
        a[:, 2] = 1.0
        out = per_dim_r_squared(a, a * 0.5)
        assert np.isnan(out[2]) and np.all(out[:2] < 1)

    def test_r2_plus_standardized_mse(self, rng):
        # for a reference with unit column variances R^2 = 1 - MSE / var
        a = rng.normal(size=(200, 3))
        a = (a - a.mean(axis=0)) / a.std(axis=0)
        b = a + 0.3 * rng.normal(size=a.shape)
        assert r_squared(a, b) + mse(a, b) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("s2,r2,expected", [(1, 0.3017, 0.6035), (9, 0.05436, 0.5436),
                                                (18, 0.0271, 0.5149), (49, 0.0064, 0.3201)])
    def test_fraction_of_max_table(self, s2, r2, expected):
        assert fraction_of_max(r2, s2) == pytest.approx(expected, abs=1e-3)

    @given(st.floats(-1, 1), st.floats(0, 100))
    def test_fraction_identity(self, r2, s2):
        assert fraction_of_max(r2, s2) == pytest.approx(r2 * (1 + s2), rel=1e-12, abs=1e-12)

    @pytest.mark.parametrize("s2", [1.0, 9.0, 49.0])
    def test_ceiling_oracle(self, s2):
        n = 100_000
        eta = sample_latents(n, 3, seed=12)
        eta_hat = perturb_etas(eta, np.arange(n), s2, seed=12, level_index=1)
        # E[eta_hat | eta] is the best possible predictor and attains the ceiling
        r2 = r_squared(eta_hat, eta / math.sqrt(1 + s2))
        assert abs(r2 - 1 / (1 + s2)) < 0.01


class TestBootstrap:
    def test_deterministic(self, rng):
        a, b = rng.normal(size=(2, 60, 3))
        assert bootstrap_ci("r2", a, b, seed=4) == bootstrap_ci("r2", a, b, seed=4)
        assert bootstrap_ci("r2", a, b, seed=4) != bootstrap_ci("r2", a, b, seed=5)

    def test_constant_zero_width(self):
        assert bootstrap_ci("nll-mean", np.full(25, 2.5)) == (2.5, 2.5)
        assert bootstrap_ci("mse", np.ones((10, 3)), np.ones((10, 3))) == (0.0, 0.0)

    def test_contains_point(self, rng):
        a = rng.normal(size=(300, 3))
        b = a + rng.normal(size=a.shape)
        for metric, point in (("mse", mse(a, b)), ("r2", r_squared(a, b))):
            lo, hi = bootstrap_ci(metric, a, b, seed=1)
            assert lo <= point <= hi

    def test_batched_matches_loop(self, rng):
        a, b = rng.normal(size=(2, 40, 3))
        idx = ev.resample_indices(40, 30, 7)
        dist = ev.bootstrap_distribution("r2", a, b, idx)
        loop = [r_squared(a[i], b[i]) for i in idx]
        np.testing.assert_allclose(dist, loop, rtol=1e-12)

    def test_coverage_calibration(self):
        # 95% intervals for the mean of n=100 standard normals
        hits = 0
        reps = 500
        for r in range(reps):
            x = np.random.default_rng(1000 + r).normal(size=100)
            lo, hi = bootstrap_ci("nll-mean", x, seed=r)
            hits += lo <= 0.0 <= hi
        assert 0.92 < hits / reps < 0.98

    def test_nan_resamples_dropped(self):
        a = np.array([[0.0], [1.0]])
        lo, hi = bootstrap_ci("r2", a, a * 0.9, resamples=200)
        assert lo <= hi

    def test_all_undefined(self):
        with pytest.raises(UndefinedMetric):
            ev.percentile_interval(np.full(5, np.nan))

    @pytest.mark.parametrize("kw", [dict(metric="median"), dict(resamples=0), dict(level=1.0)])
    def test_invalid(self, rng, kw):
        args = dict(metric="mse", resamples=10, level=0.95) | kw
        a = rng.normal(size=(10, 3))
        with pytest.raises(InvalidArgument):
            bootstrap_ci(args["metric"], a, a, resamples=args["resamples"], level=args["level"])

    def test_too_few_subjects(self):
        with pytest.raises(InvalidArgument):
            ev.resample_indices(1)


def make_artifacts(levels=(0.0, 1.0, 9.0, 18.0, 49.0), n=80):
    eta = sample_latents(n, 3, seed=3)
    out = {}
    for li, s2 in enumerate(levels):
        eh = perturb_etas(eta, np.arange(n), s2, seed=3, level_index=li)
        approx = 0.8 * eh + 0.1 * sample_latents(n, 3, seed=40 + li)
        pred = eta / math.sqrt(1 + s2) * 0.6
        nll = {c: np.full(n, float(i)) + 0.01 * np.arange(n)
               for i, c in enumerate(("true", "predicted", "approximate", "average", "random"))}
        out[s2] = LevelArtifacts(s2, eh, pred, approx, nll)
    return out


class TestReport:
    def test_structure(self):
        rep = build_report(make_artifacts(), (0.0, 1.0, 9.0, 18.0, 49.0), seed=2, resamples=200)
        assert len(rep.rows) == 15 and len(rep.nll) == 5
        for r in rep.rows:
            assert r.mse_ci[0] <= r.mse_ci[1] and r.r2_ci[0] <= r.r2_ci[1]
            assert r.theoretical_max == pytest.approx(1 / (1 + r.sigma2))
            if r.comparison == "eta_hat~eta_pred":
                assert r.fraction_of_max == pytest.approx(r.r2 * (1 + r.sigma2))
            else:
                assert r.fraction_of_max is None
        assert rep.row(9.0, "eta_hat~eta_approx").sigma2 == 9.0
        assert rep.nll_summary(0.0).means["random"] == pytest.approx(4.395)

    def test_json_and_text(self):
        rep = build_report(make_artifacts(), (0.0, 1.0, 9.0, 18.0, 49.0), resamples=50)
        doc = json.loads(rep.to_json())
        assert len(doc["metrics"]) == 15 and len(doc["nll"]) == 5
        text = rep.to_text()
        assert "eta_hat~eta_pred" in text and "49" in text

    def test_deterministic(self):
        a = build_report(make_artifacts(), (0.0, 1.0), seed=1, resamples=100)
        b = build_report(make_artifacts(), (0.0, 1.0), seed=1, resamples=100)
        assert a.to_json() == b.to_json()

    def test_missing_level(self):
        with pytest.raises(InvalidArgument, match="49"):
            build_report(make_artifacts((0.0, 1.0)), (0.0, 1.0, 49.0))

    def test_unknown_row(self):
        rep = build_report(make_artifacts((0.0,)), (0.0,), resamples=20)
        with pytest.raises(KeyError):
            rep.row(1.0, "eta_hat~eta_pred")
