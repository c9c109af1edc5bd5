import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from synthlong import nlme
from synthlong.errors import InvalidArgument, NumericalFailure
from synthlong.nlme import (FixedEffects, StructuralParams, Tolerances, default_time_grid, observe,
                            params_from_eta, simulate_concentrations, solve_ode)


class TestParams:
    def test_baseline(self):
        p = params_from_eta(np.zeros(3))
        assert (p.ka, p.imax, p.ic50) == (1.0, 2.1, 0.4)

    def test_ka_doubling(self):
        assert params_from_eta([math.log(2), 0, 0]).ka == pytest.approx(2.0, rel=1e-15)

    def test_ic50_quarter(self):
        assert params_from_eta([0, 0, -math.log(4)]).ic50 == pytest.approx(0.1, rel=1e-15)

    def test_nonpositive_rejected(self):
        with pytest.raises(InvalidArgument):
            StructuralParams(ka=0.0, imax=1.0, ic50=1.0)

    def test_nonfinite_eta(self):
        with pytest.raises(InvalidArgument):
            params_from_eta([np.inf, 0, 0])

    def test_batch_matches_scalar(self, rng):
        E = rng.normal(size=(5, 3))
        P = nlme.params_array(E)
        for e, row in zip(E, P):
            p = params_from_eta(e)
            np.testing.assert_allclose(row, [p.ka, p.imax, p.ic50], rtol=1e-15)


class TestGrid:
    def test_default(self):
        g = default_time_grid()
        assert g.size == 21 and g[0] == 0.5 and g[-1] == 10.5

    @pytest.mark.parametrize("grid", [[], [1.0, 1.0], [2.0, 1.0], [-0.1, 1.0], [0.5, np.nan]])
    def test_invalid(self, grid):
        with pytest.raises(InvalidArgument):
            nlme.check_time_grid(grid)


class TestSolve:
    def test_depot_closed_form(self):
        tr = solve_ode(params_from_eta(np.zeros(3)), grid=[1.0])
        assert abs(tr.D[0] - math.exp(-1)) < 1e-8

    def test_small_time_expansion(self):
        # C(t) = t - (Ka^2 + Ka*Imax/IC50) t^2 / 2 + O(t^3) with C(0) = 0, D(0) = 1
        t = 1e-3
        c = solve_ode(params_from_eta(np.zeros(3)), grid=[t]).C[0]
        assert abs(c - t) < 1e-5
        assert abs(c - (t - (1 + 2.1 / 0.4) * t * t / 2)) < 1e-8

    def test_golden_baseline(self):
        times, D, C = oracles.read_golden()
        tr = solve_ode(params_from_eta(np.zeros(3)), grid=times)
        np.testing.assert_allclose(tr.C, C, rtol=0, atol=1e-6)
        np.testing.assert_allclose(tr.D, D, rtol=0, atol=1e-8)

    def test_golden_file_reproduces(self):
        times, D, C = oracles.read_golden()
        D2, C2 = oracles.rk4_trajectory(np.zeros(3), times)
        np.testing.assert_allclose(C2, C, rtol=0, atol=1e-14)

    def test_invariants(self, rng):
        for e in rng.normal(size=(10, 3)):
            tr = solve_ode(params_from_eta(e))
            assert np.all(tr.C >= 0)
            assert np.all(tr.D > 0) and np.all(np.diff(tr.D) < 0)

    def test_long_horizon_decay(self):
        grid = np.concatenate([default_time_grid(), [50.0, 100.0, 200.0]])
        tr = solve_ode(params_from_eta(np.zeros(3)), grid=grid)
        assert tr.C[-1] < 1e-3

    def test_halving_tolerances(self, rng):
        for e in rng.normal(size=(10, 3)):
            p = params_from_eta(e)
            a = solve_ode(p, tol=Tolerances()).C
            b = solve_ode(p, tol=Tolerances().halved()).C
            assert np.max(np.abs(a - b)) < 1e-7

    def test_stiff_corners_terminate(self):
        for e in itertools.product((-5.0, 5.0), repeat=3):
            tr = solve_ode(params_from_eta(e))
            assert np.all(np.isfinite(tr.C)) and np.all(tr.C >= 0)

    def test_step_budget_failure(self):
        with pytest.raises(NumericalFailure) as info:
            solve_ode(params_from_eta(np.zeros(3)), tol=Tolerances(max_steps=3))
        assert "ka" in info.value.diagnostics and "t" in info.value.diagnostics

    def test_output_at_zero(self):
        tr = solve_ode(params_from_eta(np.zeros(3)), grid=[0.0, 0.5])
        assert tr.C[0] == 0.0 and tr.D[0] == 1.0

    def test_batch_matches_single(self, rng):
        E = rng.normal(size=(4, 3))
        batch = simulate_concentrations(E)
        for e, row in zip(E, batch):
            np.testing.assert_array_equal(row, solve_ode(params_from_eta(e)).C)

    def test_clamping(self):
        a = simulate_concentrations([[9.0, 0.0, 0.0]])
        b = simulate_concentrations([[5.0, 0.0, 0.0]], clamp=False)
        np.testing.assert_array_equal(a, b)

    def test_fixed_effects_used(self):
        fx = FixedEffects(d0=2.0)
        tr = solve_ode(params_from_eta(np.zeros(3)), fx=fx, grid=[1.0])
        assert abs(tr.D[0] - 2 * math.exp(-1)) < 1e-12


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_nonnegative_concentration(eta):
    assert np.all(simulate_concentrations([eta]) >= 0)


class TestObserve:
    def traj(self):
        return solve_ode(params_from_eta(np.zeros(3)))

    def test_zero_noise(self):
        tr = self.traj()
        np.testing.assert_array_equal(observe(tr, 0.0).y, tr.C)

    def test_noise_std(self):
        tr = self.traj()
        res = np.array([observe(tr, 0.01, seed=5, subject_id=i).y[3] for i in range(100_000)]) - tr.C[3]
        assert 0.0098 < res.std() < 0.0102

    def test_deterministic(self):
        tr = self.traj()
        a = observe(tr, 0.01, seed=9, subject_id=4, level_index=2)
        b = observe(tr, 0.01, seed=9, subject_id=4, level_index=2)
        np.testing.assert_array_equal(a.y, b.y)

    def test_negative_sigma(self):
        with pytest.raises(InvalidArgument):
            observe(self.traj(), -0.01)
