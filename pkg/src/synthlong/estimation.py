"""Empirical-Bayes recovery of random effects, Laplace marginal likelihood and conditional NLL.

The per-subject objective is the negative log joint density

    f(eta) = sum_j [ (y_j - C_j(eta))^2 / (2 s^2) + 0.5 log(2 pi s^2) ]
             + 0.5 eta' Omega^-1 eta + 0.5 log((2 pi)^3 det Omega)

whose minimizer is the empirical-Bayes (MAP) estimate.  Both the objective and
the Nelder-Mead search are compiled with numba so a whole fit runs without
returning to the interpreter.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import nlme
from .errors import InvalidArgument, NumericalFailure
from .nlme import FixedEffects, ObservationSet, Tolerances

LOG_2PI = math.log(2.0 * math.pi)
HESSIAN_STEP = 1e-4
SEARCH_BOUND = nlme.ETA_CLAMP
# the Hessian is differenced at h = 1e-4, so the ODE must be far more accurate than h^2
HESSIAN_TOL = Tolerances(rtol=1e-12, atol=1e-14)


@dataclass(frozen=True)
class Prior:
    """Zero-mean Gaussian prior on the random effects."""

    omega: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=float)
        if omega.shape != (3, 3) or not np.allclose(omega, omega.T):
            raise InvalidArgument("omega must be a symmetric 3x3 matrix")
        try:
            np.linalg.cholesky(omega)
        except np.linalg.LinAlgError:
            raise InvalidArgument("omega must be positive definite") from None
        object.__setattr__(self, "omega", omega)

    @property
    def precision(self) -> np.ndarray:
        return np.linalg.inv(self.omega)

    @property
    def log_norm(self) -> float:
        """``0.5 log((2 pi)^3 det Omega)``."""
        return 0.5 * (3 * LOG_2PI + np.linalg.slogdet(self.omega)[1])


@dataclass(frozen=True)
class OptimizerOptions:
    """Multi-start Nelder-Mead settings.

    Every point of ``{-1, 0, 1}^3`` (which contains the origin) is scored, and
    a simplex search is run from the ``n_polish`` best-scoring starts.
    """

    start_values: tuple = (-1.0, 0.0, 1.0)
    n_polish: int = 4
    initial_step: float = 0.25
    fatol: float = 1e-10
    max_iter: int = 2000
    tol: Tolerances = Tolerances()

    def starts(self) -> np.ndarray:
        grid = np.array(list(itertools.product(self.start_values, repeat=3)), dtype=float)
        grid = np.unique(np.vstack([np.zeros((1, 3)), grid]), axis=0)
        # origin first so score ties resolve toward the prior mean
        return grid[np.argsort(np.abs(grid).sum(axis=1), kind="stable")]


@dataclass(frozen=True)
class EBResult:
    eta_approx: np.ndarray
    objective: float
    converged: bool
    n_evals: int
    subject_id: int = 0
    sigma2: float = 0.0


@dataclass(frozen=True)
class NLLRow:
    sigma2: float
    nll_true: float
    nll_predicted: float
    nll_approximate: float
    nll_average: float
    nll_random: float


# --------------------------------------------------------------------------
# compiled objective and simplex search

@njit(cache=True)
def _objective(eta, times, y, sigma_eps, use_prior, precision, prior_const,
               base, d0, c0, rtol, atol, max_steps, P, buf):
    ka = base[0] * math.exp(eta[0])
    imax = base[1] * math.exp(eta[1])
    ic50 = base[2] * math.exp(eta[2])
    total = 0.0
    n = times.shape[0]
    if n > 0:
        status, _, _ = nlme.dopri_mm(ka, imax, ic50, d0, c0, times, rtol, atol, max_steps, buf, P)
        if status != 0:
            return np.inf
        inv2s2 = 0.5 / (sigma_eps * sigma_eps)
        for j in range(n):
            r = y[j] - buf[j]
            total += r * r * inv2s2
        total += n * 0.5 * math.log(2.0 * math.pi * sigma_eps * sigma_eps)
    if use_prior:
        q = 0.0
        for a in range(3):
            for b in range(3):
                q += eta[a] * precision[a, b] * eta[b]
        total += 0.5 * q + prior_const
    if not np.isfinite(total):
        return np.inf
    return total


@njit(cache=True)
def _search_objective(eta, times, y, sigma_eps, use_prior, precision, prior_const,
                      base, d0, c0, rtol, atol, max_steps, P, buf):
    # the search stays inside the simulator's domain |eta| <= 5; beyond it the
    # rate constants make the ODE needlessly stiff and the model is clamped anyway
    for a in range(3):
        if abs(eta[a]) > SEARCH_BOUND:
            return np.inf
    return _objective(eta, times, y, sigma_eps, use_prior, precision, prior_const,
                      base, d0, c0, rtol, atol, max_steps, P, buf)


@njit(cache=True)
def _nelder_mead(x0, step, fatol, max_iter, times, y, sigma_eps, use_prior, precision,
                 prior_const, base, d0, c0, rtol, atol, max_steps, P, buf):
    ndim = 3
    sim = np.empty((ndim + 1, ndim))
    fs = np.empty(ndim + 1)
    sim[0] = x0
    for i in range(ndim):
        sim[i + 1] = x0
        sim[i + 1, i] += step
    nfev = 0
    for i in range(ndim + 1):
        fs[i] = _search_objective(sim[i], times, y, sigma_eps, use_prior, precision, prior_const,
                           base, d0, c0, rtol, atol, max_steps, P, buf)
        nfev += 1
    converged = False
    it = 0
    xr = np.empty(ndim)
    xe = np.empty(ndim)
    xc = np.empty(ndim)
    while it < max_iter:
        order = np.argsort(fs)
        sim = sim[order]
        fs = fs[order]
        if np.isfinite(fs[0]) and fs[ndim] - fs[0] < fatol:
            converged = True
            break
        it += 1
        centroid = np.zeros(ndim)
        for i in range(ndim):
            centroid += sim[i]
        centroid /= ndim
        xr[:] = 2.0 * centroid - sim[ndim]
        fr = _search_objective(xr, times, y, sigma_eps, use_prior, precision, prior_const,
                        base, d0, c0, rtol, atol, max_steps, P, buf)
        nfev += 1
        if fr < fs[0]:
            xe[:] = 3.0 * centroid - 2.0 * sim[ndim]
            fe = _search_objective(xe, times, y, sigma_eps, use_prior, precision, prior_const,
                            base, d0, c0, rtol, atol, max_steps, P, buf)
            nfev += 1
            if fe < fr:
                sim[ndim] = xe
                fs[ndim] = fe
            else:
                sim[ndim] = xr
                fs[ndim] = fr
            continue
        if fr < fs[ndim - 1]:
            sim[ndim] = xr
            fs[ndim] = fr
            continue
        shrink = False
        if fr < fs[ndim]:
            # outside contraction
            xc[:] = 1.5 * centroid - 0.5 * sim[ndim]
            fc = _search_objective(xc, times, y, sigma_eps, use_prior, precision, prior_const,
                            base, d0, c0, rtol, atol, max_steps, P, buf)
            nfev += 1
            if fc <= fr:
                sim[ndim] = xc
                fs[ndim] = fc
            else:
                shrink = True
        else:
            xc[:] = 0.5 * centroid + 0.5 * sim[ndim]
            fc = _search_objective(xc, times, y, sigma_eps, use_prior, precision, prior_const,
                            base, d0, c0, rtol, atol, max_steps, P, buf)
            nfev += 1
            if fc < fs[ndim]:
                sim[ndim] = xc
                fs[ndim] = fc
            else:
                shrink = True
        if shrink:
            for i in range(1, ndim + 1):
                sim[i] = sim[0] + 0.5 * (sim[i] - sim[0])
                fs[i] = _search_objective(sim[i], times, y, sigma_eps, use_prior, precision,
                                   prior_const, base, d0, c0, rtol, atol, max_steps, P, buf)
                nfev += 1
    order = np.argsort(fs)
    return sim[order[0]].copy(), fs[order[0]], converged, nfev


@njit(cache=True)
def _multistart(starts, n_polish, step, fatol, max_iter, times, y, sigma_eps, use_prior,
                precision, prior_const, base, d0, c0, rtol, atol, max_steps, P):
    buf = np.empty(times.shape[0])
    n_starts = starts.shape[0]
    scores = np.empty(n_starts)
    for s in range(n_starts):
        scores[s] = _search_objective(starts[s], times, y, sigma_eps, use_prior, precision,
                               prior_const, base, d0, c0, rtol, atol, max_steps, P, buf)
    nfev = n_starts
    order = np.argsort(scores, kind="mergesort")
    best_x = starts[order[0]].copy()
    best_f = np.inf
    best_conv = False
    any_conv = False
    for k in range(min(n_polish, n_starts)):
        x, f, conv, ne = _nelder_mead(starts[order[k]], step, fatol, max_iter, times, y,
                                      sigma_eps, use_prior, precision, prior_const, base,
                                      d0, c0, rtol, atol, max_steps, P, buf)
        nfev += ne
        # converged optima take precedence over unconverged ones
        if (conv and not any_conv) or ((conv or not any_conv) and f < best_f):
            best_x = x
            best_f = f
            best_conv = conv
        any_conv = any_conv or conv
    return best_x, best_f, best_conv, nfev


# --------------------------------------------------------------------------
# public API

def _prior_args(prior: Prior | None):
    if prior is None:
        return False, np.zeros((3, 3)), 0.0
    return True, prior.precision, prior.log_norm


def _fx_args(fx: FixedEffects):
    return np.array([fx.ka_base, fx.imax_base, fx.ic50_base]), fx.d0, fx.c0


def _check_sigma(sigma_eps):
    if not sigma_eps > 0:
        raise InvalidArgument(f"sigma_eps must be > 0, got {sigma_eps}")


def neg_log_joint(eta, obs: ObservationSet, prior: Prior | None = Prior(),
                  sigma_eps: float = nlme.DEFAULT_SIGMA_EPS,
                  fx: FixedEffects = FixedEffects(), tol: Tolerances = Tolerances()) -> float:
    """Negative log of ``p(y | eta) p(eta)``; ``prior=None`` drops the prior term.

    Raises
    ------
    NumericalFailure
        If the ODE cannot be solved at ``eta``.
    """
    _check_sigma(sigma_eps)
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (3,):
        raise InvalidArgument("eta must have 3 entries")
    times = np.asarray(obs.times, dtype=float)
    if times.size:
        nlme.check_time_grid(times)
    use_prior, precision, const = _prior_args(prior)
    base, d0, c0 = _fx_args(fx)
    value = _objective(eta, times, np.asarray(obs.y, dtype=float), sigma_eps, use_prior,
                       precision, const, base, d0, c0, tol.rtol, tol.atol, tol.max_steps,
                       nlme._P, np.empty(times.size))
    if not np.isfinite(value):
        raise NumericalFailure("objective is not finite", eta=eta.tolist(),
                               subject_id=obs.subject_id)
    return float(value)


def empirical_bayes(obs: ObservationSet, prior: Prior | None = Prior(),
                    sigma_eps: float = nlme.DEFAULT_SIGMA_EPS,
                    opts: OptimizerOptions = OptimizerOptions(),
                    fx: FixedEffects = FixedEffects()) -> EBResult:
    """MAP estimate of a subject's random effects by multi-start simplex search.

    With ``prior=None`` this is the unpenalized least-squares fit.  The
    search is confined to ``|eta_k| <= 5``, the domain the simulator clamps to.
    """
    _check_sigma(sigma_eps)
    times = np.asarray(obs.times, dtype=float)
    if times.size < 1:
        raise InvalidArgument("empirical Bayes needs at least one observation")
    nlme.check_time_grid(times)
    use_prior, precision, const = _prior_args(prior)
    base, d0, c0 = _fx_args(fx)
    x, f, conv, nfev = _multistart(opts.starts(), opts.n_polish, opts.initial_step, opts.fatol,
                                   opts.max_iter, times, np.asarray(obs.y, dtype=float),
                                   sigma_eps, use_prior, precision, const, base, d0, c0,
                                   opts.tol.rtol, opts.tol.atol, opts.tol.max_steps, nlme._P)
    return EBResult(eta_approx=x, objective=float(f), converged=bool(conv and np.isfinite(f)),
                    n_evals=int(nfev), subject_id=obs.subject_id, sigma2=obs.sigma2)


def fd_hessian(func, x, step: float = HESSIAN_STEP) -> np.ndarray:
    """Central-difference Hessian of a scalar function."""
    x = np.asarray(x, dtype=float)
    n = x.size
    H = np.empty((n, n))
    f0 = func(x)
    E = np.eye(n) * step
    for i in range(n):
        H[i, i] = (func(x + E[i]) - 2.0 * f0 + func(x - E[i])) / step**2
        for j in range(i):
            H[i, j] = H[j, i] = (func(x + E[i] + E[j]) - func(x + E[i] - E[j])
                                 - func(x - E[i] + E[j]) + func(x - E[i] - E[j])) / (4 * step**2)
    return H


@dataclass(frozen=True)
class LaplaceResult:
    value: float
    eta_star: np.ndarray
    hessian: np.ndarray
    positive_definite: bool


def laplace_marginal_nll(obs: ObservationSet, prior: Prior = Prior(),
                         sigma_eps: float = nlme.DEFAULT_SIGMA_EPS,
                         opts: OptimizerOptions = OptimizerOptions(),
                         fx: FixedEffects = FixedEffects(), eb: EBResult | None = None,
                         full: bool = False):
    """Laplace approximation to ``-log int p(y | eta) p(eta) d eta``.

    ``f(eta*) + 0.5 log det H - 1.5 log(2 pi)`` with ``H`` the central-difference
    Hessian at the MAP.  A non positive-definite Hessian raises
    :class:`NumericalFailure` unless ``full=True``, in which case the value is
    returned with ``positive_definite=False`` (log|det H| is used).
    """
    if eb is None:
        eb = empirical_bayes(obs, prior, sigma_eps, opts, fx)
    if not eb.converged:
        raise NumericalFailure("empirical Bayes did not converge", subject_id=obs.subject_id)

    def f(e):
        return neg_log_joint(e, obs, prior, sigma_eps, fx, HESSIAN_TOL)

    H = fd_hessian(f, eb.eta_approx)
    sign, logdet = np.linalg.slogdet(H)
    pd = bool(sign > 0 and np.all(np.linalg.eigvalsh(H) > 0))
    value = f(eb.eta_approx) + 0.5 * logdet - 1.5 * LOG_2PI
    if not pd and not full:
        raise NumericalFailure("Hessian at the MAP is not positive definite",
                               subject_id=obs.subject_id, value=value)
    if full:
        return LaplaceResult(value=float(value), eta_star=eb.eta_approx, hessian=H,
                             positive_definite=pd)
    return float(value)


def conditional_nll(reference, candidate, sigma_eps: float = nlme.DEFAULT_SIGMA_EPS):
    """Gaussian NLL of the noise-free reference values under candidate predictions.

    Accepts 1-D arrays (one subject, returns a float) or ``(n, J)`` arrays
    (returns one value per subject).
    """
    _check_sigma(sigma_eps)
    ref = np.asarray(getattr(reference, "C", reference), dtype=float)
    cand = np.asarray(candidate, dtype=float)
    if ref.shape != cand.shape:
        raise InvalidArgument(f"shape mismatch: reference {ref.shape} vs candidate {cand.shape}")
    per_point = (ref - cand) ** 2 / (2 * sigma_eps**2) + 0.5 * math.log(2 * math.pi * sigma_eps**2)
    out = per_point.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


NLL_COLUMNS = ("true", "predicted", "approximate", "average", "random")


def nll_columns(reference, observed, eta_pred, eta_approx, eta_random,
                sigma_eps: float = nlme.DEFAULT_SIGMA_EPS, grid=None,
                fx: FixedEffects = FixedEffects()) -> dict[str, np.ndarray]:
    """Per-subject conditional NLL of each candidate against the noise-free reference.

    ``reference`` holds the ``(n, J)`` noise-free C values of the image-linked
    random effects, ``observed`` the noisy observations at one association level.
    """
    reference = np.asarray(reference, dtype=float)
    n = reference.shape[0]
    for name, arr in (("observed", observed), ("eta_pred", eta_pred),
                      ("eta_approx", eta_approx), ("eta_random", eta_random)):
        if arr is None or np.asarray(arr).shape[0] != n:
            raise InvalidArgument(f"{name} is missing or not aligned with the reference")
    sim = lambda e: nlme.simulate_concentrations(e, fx, grid)  # noqa: E731
    return {
        "true": conditional_nll(reference, observed, sigma_eps),
        "predicted": conditional_nll(reference, sim(eta_pred), sigma_eps),
        "approximate": conditional_nll(reference, sim(eta_approx), sigma_eps),
        "average": conditional_nll(reference, sim(np.zeros((n, 3))), sigma_eps),
        "random": conditional_nll(reference, sim(eta_random), sigma_eps),
    }


def nll_table(reference, levels, observed, predictions, approximations, random_etas,
              sigma_eps: float = nlme.DEFAULT_SIGMA_EPS, grid=None):
    """Mean per-subject conditional NLL for every association level.

    ``observed``, ``predictions``, ``approximations`` and ``random_etas`` map each
    level to its array.  Returns ``(rows, columns)`` where ``columns[level]`` holds
    the per-subject values needed for bootstrap intervals.
    """
    rows, columns = [], {}
    for s2 in levels:
        missing = [name for name, d in (("observations", observed), ("predictions", predictions),
                                        ("approximations", approximations),
                                        ("random effects", random_etas)) if s2 not in d]
        if missing:
            raise InvalidArgument(f"sigma2={s2}: missing {', '.join(missing)}")
        cols = nll_columns(reference, observed[s2], predictions[s2], approximations[s2],
                           random_etas[s2], sigma_eps, grid)
        columns[s2] = cols
        rows.append(NLLRow(float(s2), *(float(np.mean(cols[c])) for c in NLL_COLUMNS)))
    return rows, columns
