import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from synthlong import renderer as rd
from synthlong.errors import InvalidArgument
from synthlong.renderer import (RenderConfig, dominant_dims, encode, fit_default_encoder,
                                fit_encoder, method1_influence, method2_influence, render,
                                render_batch)
from synthlong.sampling import sample_latents

CFG = RenderConfig()
D = 128
UNCONTROLLED = [i for i in range(D) if i not in CFG.controlled_dims]


@pytest.fixture(scope="module")
def encoder():
    return fit_default_encoder(CFG, D, n=2000, seed=0)


def band_centroid(img, rows):
    sub = img[rows] - CFG.background
    y = np.arange(rows.start, rows.stop) + 0.5
    return float(np.sum(sub.mean(axis=1) * y) / np.sum(sub.mean(axis=1)))


class TestRender:
    def test_reference_image_stable(self):
        a = render(np.zeros(D))
        b = render(np.zeros(D))
        assert a.shape == (64, 64) and a.tobytes() == b.tobytes()

    def test_reference_profile(self):
        img = render(np.zeros(D))
        y = np.arange(64) + 0.5
        expected = (CFG.background + 0.8 * 0.5 * np.exp(-(y - 18) ** 2 / 32)
                    + 0.6 * 0.5 * np.exp(-(y - 46) ** 2 / 32))
        np.testing.assert_allclose(img[:, 10], expected, atol=1e-15)

    def test_uncontrolled_dims_have_no_effect(self, rng):
        z = rng.normal(size=D)
        z2 = z.copy()
        z2[UNCONTROLLED] = rng.normal(size=len(UNCONTROLLED)) * 5
        assert render(z).tobytes() == render(z2).tobytes()

    def test_position_shift(self):
        z = np.zeros(D)
        z[CFG.dim_of(0, "position")] = 1.0
        rows = slice(0, 32)
        shift = band_centroid(render(z), rows) - band_centroid(render(np.zeros(D)), rows)
        assert abs(shift - CFG.gains[0][0] * CFG.height) < 0.5

    @given(st.lists(st.floats(-6, 6), min_size=8, max_size=8))
    def test_pixels_in_unit_interval(self, vals):
        z = np.zeros(D)
        z[list(CFG.controlled_dims)] = vals
        img = render(z)
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_batch_matches_single(self, rng):
        Z = rng.normal(size=(5, D))
        B = render_batch(Z, chunk=2)
        for z, img in zip(Z, B):
            np.testing.assert_array_equal(img, render(z))

    def test_dims_too_small(self):
        with pytest.raises(InvalidArgument):
            render(np.zeros(100))

    def test_render_rejects_stack(self):
        with pytest.raises(InvalidArgument):
            render(np.zeros((2, D)))

    @pytest.mark.parametrize("kw", [dict(controlled_dims=(1, 1, 2, 3, 4, 5, 6, 7)),
                                    dict(background=1.0), dict(band_widths=(0.0, 4.0)),
                                    dict(gains=((0.1,) * 4,))])
    def test_invalid_config(self, kw):
        with pytest.raises(InvalidArgument):
            RenderConfig(**kw)

    def test_config_round_trip(self):
        assert RenderConfig.from_dict(CFG.to_dict()) == CFG

    def test_lipschitz(self, rng):
        # each factor moves a Gaussian profile; |d/dc exp(-(y-c)^2/2w^2)| <= 1/(w sqrt(e))
        x_max = CFG.width / 2
        bounds = np.zeros(8)
        for b in range(2):
            amp = CFG.band_base[b] / (CFG.band_widths[b] * math.sqrt(math.e))
            s_pos, s_tilt, s_curv, s_lum = CFG.gains[b]
            bounds[4 * b:4 * b + 4] = (amp * s_pos * CFG.height, amp * s_tilt * x_max,
                                       amp * s_curv * x_max**2 / CFG.width,
                                       CFG.band_base[b] * s_lum / 4)
        for _ in range(50):
            z1, z2 = rng.normal(size=(2, D)) * 2
            dz = np.abs(z1 - z2)[list(CFG.controlled_dims)]
            assert np.max(np.abs(render(z1) - render(z2))) <= bounds @ dz + 1e-12


class TestSensitivity:
    def test_dominant(self):
        assert dominant_dims(CFG) == (5, 61, 19)

    def test_matches_finite_difference(self):
        s = rd.pixel_sensitivity(CFG)
        z = np.zeros(D)
        k = CFG.controlled_dims[0]
        z[k] = 1e-3
        fd = np.mean(((render(z) - render(-z)) / 2e-3) ** 2)
        assert s[0] == pytest.approx(fd, rel=1e-3)


class TestEncoder:
    def test_controlled_dims_recovered(self, encoder):
        Z = sample_latents(1000, D, seed=77)
        Zh = encode(render_batch(Z), encoder)
        for k in CFG.controlled_dims:
            r2 = 1 - np.mean((Z[:, k] - Zh[:, k]) ** 2) / np.var(Z[:, k])
            assert r2 >= 0.9

    def test_deterministic(self, encoder):
        again = fit_default_encoder(CFG, D, n=2000, seed=0)
        np.testing.assert_array_equal(again.weights, encoder.weights)

    def test_zero_target_row(self, rng):
        Z = rng.normal(size=(400, D))
        Z[:, 7] = 0.0
        enc = fit_encoder(render_batch(Z), Z)
        np.testing.assert_allclose(enc.weights[7], 0.0, atol=1e-12)
        assert abs(enc.bias[7]) < 1e-12

    def test_strong_ridge_limit(self, rng):
        Z = rng.normal(size=(400, D))
        enc = fit_encoder(render_batch(Z), Z, lam=1e12)
        assert np.max(np.abs(enc.weights)) < 1e-8
        np.testing.assert_allclose(enc.bias, Z.mean(axis=0), atol=1e-10)

    def test_too_few_pairs(self, rng):
        Z = rng.normal(size=(50, D))
        with pytest.raises(InvalidArgument):
            fit_encoder(render_batch(Z), Z)

    def test_count_mismatch(self, rng):
        Z = rng.normal(size=(300, D))
        with pytest.raises(InvalidArgument):
            fit_encoder(render_batch(Z), Z[:-1])

    def test_zero_image_finite(self, encoder):
        z = encode(np.zeros((64, 64)), encoder)
        assert z.shape == (D,) and np.all(np.isfinite(z))

    def test_single_pixel_bound(self, encoder):
        img = render(sample_latents(1, D, seed=9)[0])
        bumped = img.copy()
        bumped[20, 33] += 1 / 255
        k = encoder.spec.downsample
        # the pixel moves one block mean by 1/(255 k^2), i.e. one standardized feature
        col = np.flatnonzero(encoder.spec.keep).tolist().index((20 // k) * (64 // k) + 33 // k)
        bound = np.abs(encoder.weights[:, col]) / encoder.spec.std[col] / (255 * k * k)
        assert np.all(np.abs(encode(bumped, encoder) - encode(img, encoder)) <= bound + 1e-12)
        assert np.all(encode(img, encoder) == encode(img.copy(), encoder))

    def test_shape_mismatch(self, encoder):
        with pytest.raises(InvalidArgument):
            encode(np.zeros((32, 32)), encoder)


class TestInfluence:
    def test_method1_separates(self, encoder):
        r = method1_influence(2000, CFG, encoder, seed=0)
        s = r.per_dim_score
        assert np.all(s[UNCONTROLLED] >= 0.9)
        assert np.all(s[list(CFG.controlled_dims)] <= 0.2)
        assert set(r.top(8)) == set(CFG.controlled_dims)

    def test_method1_single_sample(self, encoder):
        r = method1_influence(1, CFG, encoder)
        assert r.per_dim_score.shape == (D,) and np.all(np.isfinite(r.per_dim_score))

    @pytest.mark.parametrize("n", [0, -3])
    def test_bad_n(self, encoder, n):
        with pytest.raises(InvalidArgument):
            method1_influence(n, CFG, encoder)
        with pytest.raises(InvalidArgument):
            method2_influence(n, CFG, D)

    def test_method2_scores(self):
        r = method2_influence(500, CFG, D, seed=0)
        assert np.all(r.per_dim_score[UNCONTROLLED] == 0.0)
        assert np.all(r.per_dim_score[list(CFG.controlled_dims)] > 0.0)

    def test_method2_skip_is_exact(self):
        a = method2_influence(20, CFG, D, seed=3)
        b = method2_influence(20, CFG, D, seed=3, skip_uncontrolled=False)
        np.testing.assert_array_equal(a.per_dim_score, b.per_dim_score)

    def test_methods_agree(self, encoder):
        m1 = method1_influence(2000, CFG, encoder, seed=0).top(3)
        m2 = method2_influence(2000, CFG, D, seed=0).top(3)
        assert set(m1) == set(m2) == set(dominant_dims(CFG))

    def test_rank_ties_prefer_lower_index(self):
        order = rd._rank(np.array([1.0, 3.0, 3.0, 0.0]), descending=True)
        assert order.tolist() == [1, 2, 0, 3]
