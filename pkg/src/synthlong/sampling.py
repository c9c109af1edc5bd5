"""Seeded latent sampling, random-effect extraction and the association-noise transform.

Per-subject draws come from :func:`subject_normals`: each subject owns a
SplitMix64 stream whose seed hashes the master seed, a stream tag, an optional
level index and the subject id, and normals follow by Box-Muller.  A subject's
draws therefore never depend on which other subjects were generated or in
which order, and whole cohorts are produced with vectorized integer arithmetic.
Single-stream needs (shuffles, bootstrap) use :func:`derive_rng`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np

from .errors import InvalidArgument

DEFAULT_LEVELS = (0.0, 1.0, 9.0, 18.0, 49.0)
DEFAULT_LATENT_DIM = 128
N_RANDOM_EFFECTS = 3


class Stream(IntEnum):
    """Stream tags mixed into :func:`derive_rng`; one per independent source of randomness."""

    LATENT = 1
    PERTURB = 2
    OBSERVE = 3
    RANDOM_BASELINE = 4
    SPLIT = 5
    BOOTSTRAP = 6
    METHOD1 = 7
    METHOD2 = 8
    ENCODER = 9
    MONTE_CARLO = 10


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Return an independent PCG64 generator for ``(seed, *keys)``."""
    if seed < 0 or any(k < 0 for k in keys):
        raise InvalidArgument("seed and stream keys must be non-negative integers")
    ss = np.random.SeedSequence([int(seed), *(int(k) for k in keys)])
    return np.random.Generator(np.random.PCG64(ss))


_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 output function (wrapping uint64 arithmetic)."""
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _key(seed: int, keys) -> np.uint64:
    if seed < 0 or any(k < 0 for k in keys):
        raise InvalidArgument("seed and stream keys must be non-negative integers")
    k = np.array([int(seed) & _MASK64], dtype=np.uint64)
    for v in keys:
        k = _mix64((k ^ np.uint64(int(v) & _MASK64)) + _GAMMA)
    return k[0]


def subject_normals(seed: int, keys: Sequence[int], ids, k: int) -> np.ndarray:
    """Standard normals ``(len(ids), k)``; row ``i`` depends only on ``(seed, keys, ids[i])``.

    Each subject seeds a SplitMix64 sequence with a hash of its id under the
    stream key; consecutive 64-bit outputs are paired into Box-Muller draws.
    """
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size and ids.min() < 0:
        raise InvalidArgument("subject ids must be non-negative")
    base = _key(seed, keys)
    state = _mix64((ids.astype(np.uint64) ^ base) + _GAMMA)      # per-subject seed
    n_pairs = (k + 1) // 2
    steps = (np.arange(1, 2 * n_pairs + 1, dtype=np.uint64) * _GAMMA)[None, :]
    words = _mix64(state[:, None] + steps)                         # (n, 2 * n_pairs)
    u = (words >> np.uint64(11)).astype(np.float64) * 2.0**-53      # [0, 1)
    u1 = 1.0 - u[:, 0::2]                                          # (0, 1]
    u2 = u[:, 1::2]
    rad = np.sqrt(-2.0 * np.log(u1))
    z = np.empty((ids.size, 2 * n_pairs))
    z[:, 0::2] = rad * np.cos(2.0 * np.pi * u2)
    z[:, 1::2] = rad * np.sin(2.0 * np.pi * u2)
    return z[:, :k]


@dataclass(frozen=True)
class NoiseLevelSet:
    """Ascending association-noise variances; the first level must be 0."""

    levels: tuple[float, ...] = DEFAULT_LEVELS

    def __post_init__(self):
        levels = tuple(float(v) for v in self.levels)
        if not levels:
            raise InvalidArgument("noise level set is empty")
        if levels[0] != 0.0:
            raise InvalidArgument(f"first noise level must be 0, got {levels[0]}")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise InvalidArgument(f"noise levels must be distinct and ascending: {levels}")
        if not all(np.isfinite(levels)):
            raise InvalidArgument("noise levels must be finite")
        object.__setattr__(self, "levels", levels)

    def __iter__(self):
        return iter(self.levels)

    def __len__(self):
        return len(self.levels)

    def index(self, sigma2: float) -> int:
        try:
            return self.levels.index(float(sigma2))
        except ValueError:
            raise InvalidArgument(f"sigma2={sigma2} is not in the level set {self.levels}") from None


@dataclass(frozen=True)
class Eta:
    values: np.ndarray
    subject_id: int = 0


@dataclass(frozen=True)
class EtaHat:
    values: np.ndarray
    sigma2: float
    subject_id: int = 0
    r: np.ndarray = field(default=None, repr=False)


def sample_latent(subject_id: int, d: int, seed: int) -> np.ndarray:
    """Latent code of a single subject, drawn from its own stream."""
    return subject_normals(seed, (Stream.LATENT,), [subject_id], d)[0]


def sample_latents(n: int, d: int = DEFAULT_LATENT_DIM, seed: int = 0,
                   first_id: int = 0) -> np.ndarray:
    """Draw ``n`` standard-normal latent vectors of dimension ``d``.

    Row ``i`` is the latent of subject ``first_id + i`` and is reproduced
    exactly by ``sample_latent(first_id + i, d, seed)``.

    Returns
    -------
    ndarray of shape ``(n, d)``
    """
    if n < 1:
        raise InvalidArgument(f"n must be >= 1, got {n}")
    if d < N_RANDOM_EFFECTS:
        raise InvalidArgument(f"latent dimension must be >= {N_RANDOM_EFFECTS}, got {d}")
    return subject_normals(seed, (Stream.LATENT,), np.arange(first_id, first_id + n), d)


def _check_indices(indices: Sequence[int], d: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or idx.size != N_RANDOM_EFFECTS:
        raise InvalidArgument(f"expected {N_RANDOM_EFFECTS} indices, got {list(indices)}")
    if len(set(idx.tolist())) != idx.size:
        raise InvalidArgument(f"duplicate latent index in {idx.tolist()}")
    if np.any(idx < 0) or np.any(idx >= d):
        raise InvalidArgument(f"latent index out of range [0, {d}): {idx.tolist()}")
    return idx


def extract_eta(z: np.ndarray, indices: Sequence[int], subject_id: int = 0) -> Eta:
    """Select the random-effect subset ``z[indices]``."""
    z = np.asarray(z, dtype=float)
    idx = _check_indices(indices, z.shape[-1])
    return Eta(values=z[idx].copy(), subject_id=subject_id)


def extract_etas(latents: np.ndarray, indices: Sequence[int]) -> np.ndarray:
    """Batch version of :func:`extract_eta`; returns an ``(n, 3)`` copy."""
    latents = np.atleast_2d(np.asarray(latents, dtype=float))
    idx = _check_indices(indices, latents.shape[1])
    return latents[:, idx].copy()


def association_transform(eta, r, sigma2: float) -> np.ndarray:
    """Variance-preserving mix ``(eta + r) / sqrt(1 + sigma2)``.

    Works elementwise, so ``eta`` and ``r`` may be single vectors or ``(n, 3)``
    batches.  With ``r ~ N(0, sigma2 I)`` and ``eta ~ N(0, I)`` the result is
    again standard normal and correlates with ``eta`` at ``1/sqrt(1 + sigma2)``.
    """
    if sigma2 < 0:
        raise InvalidArgument(f"sigma2 must be >= 0, got {sigma2}")
    eta = np.asarray(eta, dtype=float)
    if sigma2 == 0:
        return eta.copy()
    return (eta + np.asarray(r, dtype=float)) / np.sqrt(1.0 + sigma2)


def draw_association_noise(subject_id: int, sigma2: float, seed: int,
                           level_index: int = 0) -> np.ndarray:
    """``r ~ N(0, sigma2 I_3)`` from the subject's perturbation stream."""
    if sigma2 < 0:
        raise InvalidArgument(f"sigma2 must be >= 0, got {sigma2}")
    z = subject_normals(seed, (Stream.PERTURB, level_index), [subject_id], N_RANDOM_EFFECTS)[0]
    return np.sqrt(sigma2) * z


def perturb_eta(eta: Eta, sigma2: float, seed: int, level_index: int = 0) -> EtaHat:
    """Apply association noise of variance ``sigma2`` to one subject's random effects."""
    if sigma2 < 0:
        raise InvalidArgument(f"sigma2 must be >= 0, got {sigma2}")
    values = np.asarray(eta.values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise InvalidArgument("eta contains non-finite entries")
    r = draw_association_noise(eta.subject_id, sigma2, seed, level_index)
    return EtaHat(values=association_transform(values, r, sigma2), sigma2=float(sigma2),
                  subject_id=eta.subject_id, r=r)


def perturb_etas(etas: np.ndarray, subject_ids: Sequence[int], sigma2: float, seed: int,
                 level_index: int = 0) -> np.ndarray:
    """Per-subject :func:`perturb_eta` over an ``(n, 3)`` batch."""
    etas = np.asarray(etas, dtype=float)
    if len(subject_ids) != etas.shape[0]:
        raise InvalidArgument("subject_ids and etas differ in length")
    if sigma2 < 0:
        raise InvalidArgument(f"sigma2 must be >= 0, got {sigma2}")
    r = np.sqrt(sigma2) * subject_normals(seed, (Stream.PERTURB, level_index), subject_ids,
                                          N_RANDOM_EFFECTS)
    return association_transform(etas, r, sigma2)


def theoretical_max(sigma2: float) -> float:
    """Best attainable R^2 of any image-based predictor of eta-hat: ``1/(1+sigma2)``."""
    if sigma2 < 0:
        raise InvalidArgument(f"sigma2 must be >= 0, got {sigma2}")
    return 1.0 / (1.0 + sigma2)
