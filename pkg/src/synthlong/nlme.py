"""Structural ODE model, parameter maps, trajectory simulation and the observation model.

The model is a one-compartment depot with first-order absorption feeding a
central compartment with saturable (Michaelis-Menten) elimination::

    dD/dt = -Ka * D
    dC/dt =  Ka * D - Imax * C / (IC50 + C)

with ``Ka = Ka_base * exp(eta_1)``, ``Imax = Imax_base * exp(eta_2)`` and
``IC50 = IC50_base * exp(eta_3)``.  The depot has the closed form
``D(t) = D0 * exp(-Ka t)``; ``C`` is integrated with an embedded
Dormand-Prince 5(4) pair and its quartic dense output, compiled with numba.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import InvalidArgument, NumericalFailure
from .sampling import Stream, subject_normals

ETA_CLAMP = 5.0
DEFAULT_SIGMA_EPS = 0.01

# solver status codes returned by the compiled kernel
_OK, _MAX_STEPS, _UNDERFLOW, _NONFINITE = 0, 1, 2, 3


@dataclass(frozen=True)
class FixedEffects:
    ka_base: float = 1.0
    imax_base: float = 2.1
    ic50_base: float = 0.4
    d0: float = 1.0
    c0: float = 0.0

    def __post_init__(self):
        if min(self.ka_base, self.imax_base, self.ic50_base) <= 0:
            raise InvalidArgument("fixed-effect bases must be strictly positive")


@dataclass(frozen=True)
class StructuralParams:
    ka: float
    imax: float
    ic50: float

    def __post_init__(self):
        if not (self.ka > 0 and self.imax > 0 and self.ic50 > 0):
            raise InvalidArgument(f"structural parameters must be positive: {self}")


@dataclass(frozen=True)
class Tolerances:
    rtol: float = 1e-8
    atol: float = 1e-10
    max_steps: int = 5_000_000

    def halved(self) -> "Tolerances":
        return Tolerances(self.rtol / 2, self.atol / 2, self.max_steps)


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    D: np.ndarray
    C: np.ndarray


@dataclass(frozen=True)
class ObservationSet:
    subject_id: int
    sigma2: float
    times: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.times) != len(self.y):
            raise InvalidArgument("observation times and values differ in length")
        if not np.all(np.isfinite(self.y)):
            raise InvalidArgument("observations must be finite")


def default_time_grid(n: int = 21, spacing: float = 0.5) -> np.ndarray:
    """``t_j = spacing * j`` for ``j = 1..n`` (0.5, 1.0, ..., 10.5 by default)."""
    return spacing * np.arange(1, n + 1, dtype=float)


def check_time_grid(times) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0:
        raise InvalidArgument("time grid must be a non-empty 1-D sequence")
    if not np.all(np.isfinite(times)) or times[0] < 0:
        raise InvalidArgument("time grid must be finite and non-negative")
    if np.any(np.diff(times) <= 0):
        raise InvalidArgument("time grid must be strictly increasing")
    return times


def params_from_eta(eta_hat, fx: FixedEffects = FixedEffects()) -> StructuralParams:
    """Exponential parameter maps from random effects to ``(Ka, Imax, IC50)``."""
    e = np.asarray(getattr(eta_hat, "values", eta_hat), dtype=float)
    if e.shape != (3,) or not np.all(np.isfinite(e)):
        raise InvalidArgument(f"eta must be 3 finite values, got {e!r}")
    return StructuralParams(ka=fx.ka_base * np.exp(e[0]),
                            imax=fx.imax_base * np.exp(e[1]),
                            ic50=fx.ic50_base * np.exp(e[2]))


def clamp_eta(eta, bound: float = ETA_CLAMP) -> np.ndarray:
    return np.clip(np.asarray(eta, dtype=float), -bound, bound)


# --------------------------------------------------------------------------
# compiled Dormand-Prince 5(4) kernel for the C channel

# stage coefficients
_C2, _C3, _C4, _C5 = 1 / 5, 3 / 10, 4 / 5, 8 / 9
_A21 = 1 / 5
_A31, _A32 = 3 / 40, 9 / 40
_A41, _A42, _A43 = 44 / 45, -56 / 15, 32 / 9
_A51, _A52, _A53, _A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
_A61, _A62, _A63, _A64, _A65 = 9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656
_B1, _B3, _B4, _B5, _B6 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84
# 5th order minus embedded 4th order weights
_E1, _E3, _E4, _E5, _E6, _E7 = (71 / 57600, -71 / 16695, 71 / 1920,
                                -17253 / 339200, 22 / 525, -1 / 40)
# dense output: y(t + th*h) = y + h * sum_i K_i * (P_i1 th + P_i2 th^2 + P_i3 th^3 + P_i4 th^4)
_P = np.array([
    [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])


@njit(cache=True)
def _rhs(t, c, ka, imax, ic50, d0):
    return ka * d0 * np.exp(-ka * t) - imax * c / (ic50 + c)


@njit(cache=True)
def _initial_step(c0, f0, ka, imax, ic50, d0, rtol, atol):
    scale = atol + abs(c0) * rtol
    dn0 = abs(c0) / scale
    dn1 = abs(f0) / scale
    if dn0 < 1e-5 or dn1 < 1e-5:
        h0 = 1e-6
    else:
        h0 = 0.01 * dn0 / dn1
    c1 = c0 + h0 * f0
    f1 = _rhs(h0, c1, ka, imax, ic50, d0)
    dn2 = abs(f1 - f0) / scale / h0
    if dn1 <= 1e-15 and dn2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(dn1, dn2)) ** 0.2
    return min(100.0 * h0, h1)


@njit(cache=True)
def dopri_mm(ka, imax, ic50, d0, c0, times, rtol, atol, max_steps, out, P):
    """Integrate the C channel and write its values at ``times`` into ``out``.

    Returns ``(status, n_steps, t_reached)``.
    """
    n_out = times.shape[0]
    t_end = times[n_out - 1]
    t = 0.0
    c = c0
    k = 0
    while k < n_out and times[k] <= 0.0:
        out[k] = c0
        k += 1
    if k == n_out:
        return 0, 0, t
    k1 = _rhs(t, c, ka, imax, ic50, d0)
    h = _initial_step(c, k1, ka, imax, ic50, d0, rtol, atol)
    steps = 0
    rejected = False
    while t < t_end:
        if steps >= max_steps:
            return 1, steps, t
        h_min = 10.0 * np.abs(np.nextafter(t, np.inf) - t)
        if h < h_min:
            return 2, steps, t
        if t + h > t_end or t_end - (t + h) < h_min:
            h = t_end - t
        k2 = _rhs(t + _C2 * h, c + h * _A21 * k1, ka, imax, ic50, d0)
        k3 = _rhs(t + _C3 * h, c + h * (_A31 * k1 + _A32 * k2), ka, imax, ic50, d0)
        k4 = _rhs(t + _C4 * h, c + h * (_A41 * k1 + _A42 * k2 + _A43 * k3), ka, imax, ic50, d0)
        k5 = _rhs(t + _C5 * h, c + h * (_A51 * k1 + _A52 * k2 + _A53 * k3 + _A54 * k4),
                  ka, imax, ic50, d0)
        k6 = _rhs(t + h, c + h * (_A61 * k1 + _A62 * k2 + _A63 * k3 + _A64 * k4 + _A65 * k5),
                  ka, imax, ic50, d0)
        c_new = c + h * (_B1 * k1 + _B3 * k3 + _B4 * k4 + _B5 * k5 + _B6 * k6)
        t_new = t + h
        if t_new >= t_end:
            t_new = t_end
        k7 = _rhs(t_new, c_new, ka, imax, ic50, d0)
        steps += 1
        if not np.isfinite(c_new) or not np.isfinite(k7):
            h *= 0.2
            rejected = True
            if not np.isfinite(h) or h == 0.0:
                return 3, steps, t
            continue
        err = h * (_E1 * k1 + _E3 * k3 + _E4 * k4 + _E5 * k5 + _E6 * k6 + _E7 * k7)
        scale = atol + rtol * max(abs(c), abs(c_new))
        en = abs(err) / scale
        if en <= 1.0:
            while k < n_out and times[k] <= t_new:
                # exact solution is positive; clip solver noise below atol
                if times[k] == t_new:
                    out[k] = max(c_new, 0.0)
                else:
                    th = (times[k] - t) / h
                    acc = 0.0
                    kk = (k1, k2, k3, k4, k5, k6, k7)
                    for i in range(7):
                        poly = th * (P[i, 0] + th * (P[i, 1] + th * (P[i, 2] + th * P[i, 3])))
                        acc += kk[i] * poly
                    out[k] = max(c + h * acc, 0.0)
                k += 1
            t = t_new
            c = c_new
            k1 = k7
            if en == 0.0:
                factor = 10.0
            else:
                factor = min(10.0, 0.9 * en ** -0.2)
            if rejected:
                factor = min(1.0, factor)
            h *= factor
            rejected = False
        else:
            h *= max(0.2, 0.9 * en ** -0.2)
            rejected = True
    return 0, steps, t


@njit(cache=True)
def simulate_c_batch(params, d0, c0, times, rtol, atol, max_steps, P):
    """Solve the C channel for each row ``(Ka, Imax, IC50)`` of ``params``."""
    n = params.shape[0]
    out = np.empty((n, times.shape[0]))
    status = np.zeros(n, dtype=np.int64)
    for i in range(n):
        s, _, _ = dopri_mm(params[i, 0], params[i, 1], params[i, 2], d0, c0, times,
                           rtol, atol, max_steps, out[i], P)
        status[i] = s
    return out, status


_STATUS_TEXT = {
    _MAX_STEPS: "step budget exhausted",
    _UNDERFLOW: "step-size underflow",
    _NONFINITE: "non-finite state",
}


def solve_ode(p: StructuralParams, fx: FixedEffects = FixedEffects(), grid=None,
              tol: Tolerances = Tolerances()) -> Trajectory:
    """Solve the depot/central system and report both channels on ``grid``.

    Raises
    ------
    NumericalFailure
        If the adaptive integrator cannot reach the end of the grid.
    """
    times = check_time_grid(default_time_grid() if grid is None else grid)
    out = np.empty(times.size)
    status, steps, t_reached = dopri_mm(p.ka, p.imax, p.ic50, fx.d0, fx.c0, times,
                                        tol.rtol, tol.atol, tol.max_steps, out, _P)
    if status != _OK:
        raise NumericalFailure(f"ODE solver failed: {_STATUS_TEXT[status]}",
                               ka=p.ka, imax=p.imax, ic50=p.ic50, t=t_reached, steps=steps)
    D = fx.d0 * np.exp(-p.ka * times)
    return Trajectory(times=times, D=D, C=out)


def params_array(etas, fx: FixedEffects = FixedEffects()) -> np.ndarray:
    """Vectorized :func:`params_from_eta` returning an ``(n, 3)`` array."""
    etas = np.atleast_2d(np.asarray(etas, dtype=float))
    base = np.array([fx.ka_base, fx.imax_base, fx.ic50_base])
    return base * np.exp(etas)


def simulate_concentrations(etas, fx: FixedEffects = FixedEffects(), grid=None,
                            tol: Tolerances = Tolerances(), clamp: bool = True) -> np.ndarray:
    """Noise-free C values of many subjects, shape ``(n, len(grid))``.

    ``clamp`` limits each random effect to ``[-5, 5]`` before the parameter maps.
    """
    times = check_time_grid(default_time_grid() if grid is None else grid)
    etas = np.atleast_2d(np.asarray(etas, dtype=float))
    if clamp:
        etas = clamp_eta(etas)
    params = params_array(etas, fx)
    out, status = simulate_c_batch(params, fx.d0, fx.c0, times, tol.rtol, tol.atol,
                                   tol.max_steps, _P)
    bad = np.flatnonzero(status)
    if bad.size:
        i = int(bad[0])
        raise NumericalFailure(f"ODE solver failed: {_STATUS_TEXT[int(status[i])]}",
                               row=i, eta=etas[i].tolist())
    return out


def observe(traj: Trajectory, sigma_eps: float = DEFAULT_SIGMA_EPS, seed: int = 0,
            subject_id: int = 0, sigma2: float = 0.0, level_index: int = 0) -> ObservationSet:
    """Add i.i.d. ``N(0, sigma_eps^2)`` residual error to the C channel."""
    if sigma_eps < 0:
        raise InvalidArgument(f"sigma_eps must be >= 0, got {sigma_eps}")
    noise = subject_normals(seed, (Stream.OBSERVE, level_index), [subject_id], traj.C.size)[0]
    y = traj.C + sigma_eps * noise if sigma_eps > 0 else traj.C.copy()
    return ObservationSet(subject_id=subject_id, sigma2=float(sigma2),
                          times=traj.times.copy(), y=y)
