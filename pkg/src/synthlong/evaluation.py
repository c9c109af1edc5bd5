"""Metrics, bootstrap intervals and the evaluation report.

R^2 and MSE are pooled over the three random-effect coordinates; per-coordinate
values are reported alongside as diagnostics.  Bootstrap intervals resample
subjects, and every metric at one noise level is computed on the same set of
resampled index vectors so the intervals are paired.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import InvalidArgument, UndefinedMetric
from .estimation import NLL_COLUMNS
from .sampling import Stream, derive_rng, theoretical_max

COMPARISONS = ("eta_hat~eta_pred", "eta_hat~eta_approx", "eta_approx~eta_pred")
DEFAULT_RESAMPLES = 1000
DEFAULT_LEVEL = 0.95
_CHUNK = 64


def _pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    if a.shape[0] < 1:
        raise InvalidArgument("need at least one row")
    return a, b


def mse(a, b) -> float:
    """Mean squared difference pooled over every entry."""
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def r_squared(reference, candidate) -> float:
    """Pooled coefficient of determination with per-column reference means.

    Raises
    ------
    UndefinedMetric
        If the reference has zero variance in every column.
    """
    ref, cand = _pair(reference, candidate)
    if ref.shape[0] < 2:
        raise InvalidArgument("R^2 needs at least two rows")
    ss_tot = float(np.sum((ref - ref.mean(axis=0)) ** 2))
    if ss_tot == 0.0:
        raise UndefinedMetric("reference has zero variance; R^2 is undefined")
    return 1.0 - float(np.sum((ref - cand) ** 2)) / ss_tot


def per_dim_r_squared(reference, candidate) -> np.ndarray:
    """R^2 of each column separately; NaN where a column has zero variance."""
    ref, cand = _pair(reference, candidate)
    ss_tot = np.sum((ref - ref.mean(axis=0)) ** 2, axis=0)
    ss_res = np.sum((ref - cand) ** 2, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(ss_tot > 0, 1.0 - ss_res / np.where(ss_tot > 0, ss_tot, 1.0), np.nan)


def fraction_of_max(r2: float, sigma2: float) -> float:
    """Achieved R^2 as a fraction of the ceiling ``1/(1+sigma2)``."""
    return float(r2) / theoretical_max(sigma2)


# --------------------------------------------------------------------------
# bootstrap

def _batched_mse(ref, cand, idx):
    d = ref[idx] - cand[idx]                       # (B, n, k)
    return np.mean(d * d, axis=(1, 2))


def _batched_r2(ref, cand, idx):
    r = ref[idx]
    res = np.sum((r - cand[idx]) ** 2, axis=(1, 2))
    tot = np.sum((r - r.mean(axis=1, keepdims=True)) ** 2, axis=(1, 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(tot > 0, 1.0 - res / np.where(tot > 0, tot, 1.0), np.nan)


def _batched_mean(values, _unused, idx):
    return values[idx].reshape(idx.shape[0], -1).mean(axis=1)


_BATCHED: dict[str, Callable] = {"mse": _batched_mse, "r2": _batched_r2, "nll-mean": _batched_mean}
_POINT: dict[str, Callable] = {"mse": mse, "r2": r_squared,
                               "nll-mean": lambda v, _=None: float(np.mean(v))}


def resample_indices(n: int, resamples: int = DEFAULT_RESAMPLES, seed: int = 0,
                     *keys: int) -> np.ndarray:
    """``(resamples, n)`` subject indices drawn with replacement from a derived stream."""
    if n < 2:
        raise InvalidArgument(f"bootstrap needs at least 2 subjects, got {n}")
    if resamples < 1:
        raise InvalidArgument(f"resamples must be >= 1, got {resamples}")
    return derive_rng(seed, Stream.BOOTSTRAP, *keys).integers(0, n, size=(resamples, n))


def bootstrap_distribution(metric: str, a, b=None, idx: np.ndarray | None = None,
                           resamples: int = DEFAULT_RESAMPLES, seed: int = 0) -> np.ndarray:
    """Metric recomputed on each subject-level resample."""
    if metric not in _BATCHED:
        raise InvalidArgument(f"unknown metric {metric!r}; choose from {sorted(_BATCHED)}")
    a = np.asarray(a, dtype=float)
    if metric == "nll-mean":
        ref, cand = a, None
    else:
        ref, cand = _pair(a, b)
    n = ref.shape[0]
    if idx is None:
        idx = resample_indices(n, resamples, seed)
    elif idx.ndim != 2 or (idx.size and idx.max() >= n):
        raise InvalidArgument("resample indices do not match the data")
    out = np.empty(idx.shape[0])
    for s in range(0, idx.shape[0], _CHUNK):
        out[s:s + _CHUNK] = _BATCHED[metric](ref, cand, idx[s:s + _CHUNK])
    return out


def percentile_interval(dist: np.ndarray, level: float = DEFAULT_LEVEL) -> tuple[float, float]:
    if not 0 < level < 1:
        raise InvalidArgument(f"level must lie in (0, 1), got {level}")
    dist = np.asarray(dist, dtype=float)
    # tiny samples can draw one subject repeatedly, leaving R^2 undefined;
    # such resamples are dropped rather than poisoning the interval
    dist = dist[~np.isnan(dist)]
    if dist.size == 0:
        raise UndefinedMetric("metric is undefined on every bootstrap resample")
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(dist, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def bootstrap_ci(metric: str, a, b=None, resamples: int = DEFAULT_RESAMPLES,
                 level: float = DEFAULT_LEVEL, seed: int = 0,
                 idx: np.ndarray | None = None) -> tuple[float, float]:
    """Percentile bootstrap interval for ``mse``, ``r2`` (pairs of arrays) or ``nll-mean``.

    Examples
    --------
    >>> lo, hi = bootstrap_ci("nll-mean", np.full(10, -3.0))
    >>> (lo, hi)
    (-3.0, -3.0)
    """
    dist = bootstrap_distribution(metric, a, b, idx, resamples, seed)
    return percentile_interval(dist, level)


# --------------------------------------------------------------------------
# report

@dataclass(frozen=True)
class MetricRow:
    sigma2: float
    comparison: str
    mse: float
    mse_ci: tuple[float, float]
    r2: float
    r2_ci: tuple[float, float]
    theoretical_max: float
    fraction_of_max: float | None = None
    fraction_ci: tuple[float, float] | None = None
    per_dim_r2: tuple[float, ...] = ()


@dataclass(frozen=True)
class NLLSummary:
    sigma2: float
    means: dict
    cis: dict


@dataclass(frozen=True)
class LevelArtifacts:
    """Test-split arrays for one noise level.

    ``nll`` maps each column name in :data:`NLL_COLUMNS` to per-subject values.
    """

    sigma2: float
    eta_hat: np.ndarray
    eta_pred: np.ndarray
    eta_approx: np.ndarray
    nll: Mapping[str, np.ndarray] = field(default_factory=dict)


@dataclass
class EvalReport:
    levels: tuple[float, ...]
    rows: list[MetricRow]
    nll: list[NLLSummary]
    config_digest: str = ""
    seed: int = 0
    resamples: int = DEFAULT_RESAMPLES
    level: float = DEFAULT_LEVEL
    extras: dict = field(default_factory=dict)

    def row(self, sigma2: float, comparison: str) -> MetricRow:
        for r in self.rows:
            if r.sigma2 == float(sigma2) and r.comparison == comparison:
                return r
        raise KeyError((sigma2, comparison))

    def nll_summary(self, sigma2: float) -> NLLSummary:
        for s in self.nll:
            if s.sigma2 == float(sigma2):
                return s
        raise KeyError(sigma2)

    def to_dict(self) -> dict:
        return {"levels": list(self.levels), "config_digest": self.config_digest,
                "seed": self.seed, "bootstrap": {"resamples": self.resamples, "level": self.level},
                "metrics": [_jsonable(asdict(r)) for r in self.rows],
                "nll": [_jsonable(asdict(s)) for s in self.nll],
                "extras": _jsonable(self.extras)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_text(self) -> str:
        return format_tables(self)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


def build_report(artifacts: Mapping[float, LevelArtifacts], levels: Sequence[float],
                 seed: int = 0, config_digest: str = "", resamples: int = DEFAULT_RESAMPLES,
                 level: float = DEFAULT_LEVEL) -> EvalReport:
    """Three comparisons per level with intervals, plus the conditional-NLL summary.

    Raises
    ------
    InvalidArgument
        If any requested level has no artifacts.
    """
    levels = tuple(float(s) for s in levels)
    missing = [s for s in levels if s not in artifacts]
    if missing:
        raise InvalidArgument(f"no test artifacts for sigma2 levels {missing}")
    rows, nll = [], []
    for li, s2 in enumerate(levels):
        art = artifacts[s2]
        n = np.asarray(art.eta_hat).shape[0]
        idx = resample_indices(n, resamples, seed, li)
        pairs = {"eta_hat~eta_pred": (art.eta_hat, art.eta_pred),
                 "eta_hat~eta_approx": (art.eta_hat, art.eta_approx),
                 "eta_approx~eta_pred": (art.eta_approx, art.eta_pred)}
        tmax = theoretical_max(s2)
        for name in COMPARISONS:
            ref, cand = pairs[name]
            r2 = r_squared(ref, cand)
            r2_ci = percentile_interval(bootstrap_distribution("r2", ref, cand, idx), level)
            m = mse(ref, cand)
            m_ci = percentile_interval(bootstrap_distribution("mse", ref, cand, idx), level)
            frac = frac_ci = None
            if name == "eta_hat~eta_pred":
                frac = fraction_of_max(r2, s2)
                frac_ci = (fraction_of_max(r2_ci[0], s2), fraction_of_max(r2_ci[1], s2))
            rows.append(MetricRow(s2, name, m, m_ci, r2, r2_ci, tmax, frac, frac_ci,
                                  tuple(float(v) for v in per_dim_r_squared(ref, cand))))
        if art.nll:
            means, cis = {}, {}
            for col in NLL_COLUMNS:
                if col not in art.nll:
                    continue
                v = np.asarray(art.nll[col], dtype=float)
                means[col] = float(np.mean(v))
                cis[col] = percentile_interval(bootstrap_distribution("nll-mean", v, idx=idx), level)
            nll.append(NLLSummary(s2, means, cis))
    return EvalReport(levels=levels, rows=rows, nll=nll, config_digest=config_digest, seed=seed,
                      resamples=resamples, level=level)


def _fmt_ci(v, ci, digits=4):
    return f"{v:.{digits}f} [{ci[0]:.{digits}f}, {ci[1]:.{digits}f}]"


def _align(header, body):
    table = [header] + body
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    line = lambda r: "  ".join(c.rjust(w) for c, w in zip(r, widths))  # noqa: E731
    return "\n".join([line(header), "  ".join("-" * w for w in widths)] + [line(r) for r in body])


def format_tables(report: EvalReport) -> str:
    """Plain-text metric and NLL tables with aligned columns."""
    body = []
    for r in report.rows:
        body.append([f"{r.sigma2:g}", r.comparison, _fmt_ci(r.mse, r.mse_ci), _fmt_ci(r.r2, r.r2_ci),
                     f"{r.theoretical_max:.4f}",
                     "" if r.fraction_of_max is None else _fmt_ci(r.fraction_of_max, r.fraction_ci)])
    parts = [_align(["sigma2", "comparison", "MSE [CI]", "R2 [CI]", "max", "fraction of max [CI]"],
                    body)]
    if report.nll:
        cols = [c for c in NLL_COLUMNS if any(c in s.means for s in report.nll)]
        nbody = [[f"{s.sigma2:g}"] + [_fmt_ci(s.means[c], s.cis[c], 2) if c in s.means else ""
                                      for c in cols] for s in report.nll]
        parts.append(_align(["sigma2"] + cols, nbody))
    dbody = [[f"{r.sigma2:g}", r.comparison] + [f"{v:.4f}" for v in r.per_dim_r2]
             for r in report.rows]
    parts.append(_align(["sigma2", "comparison", "R2 eta1", "R2 eta2", "R2 eta3"], dbody))
    digest = f"config digest: {report.config_digest}" if report.config_digest else ""
    return "\n\n".join(p for p in parts + [digest] if p) + "\n"
