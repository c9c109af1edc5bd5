"""Block-mean image features and the ridge solve shared by the encoder and the predictor."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import InvalidArgument, NumericalFailure


@dataclass(frozen=True)
class FeatureSpec:
    """Downsampling factor plus standardization constants fitted on a training set.

    ``keep`` masks the raw features with non-zero training variance; ``mean`` and
    ``std`` cover the kept features only.
    """

    downsample: int = 4
    keep: np.ndarray | None = None
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    @property
    def fitted(self) -> bool:
        return self.mean is not None

    @property
    def n_features(self) -> int:
        if not self.fitted:
            raise InvalidArgument("feature spec has not been fitted")
        return int(self.mean.size)

    @property
    def n_dropped(self) -> int:
        return 0 if self.keep is None else int(np.size(self.keep) - np.count_nonzero(self.keep))


def block_mean(images: np.ndarray, factor: int) -> np.ndarray:
    """Average non-overlapping ``factor x factor`` blocks; accepts ``(H, W)`` or ``(n, H, W)``."""
    images = np.asarray(images, dtype=float)
    single = images.ndim == 2
    if single:
        images = images[None]
    if images.ndim != 3:
        raise InvalidArgument(f"expected (H, W) or (n, H, W) images, got shape {images.shape}")
    n, h, w = images.shape
    if factor < 1 or h % factor or w % factor:
        raise InvalidArgument(f"image shape {(h, w)} is not divisible by downsample factor {factor}")
    out = images.reshape(n, h // factor, factor, w // factor, factor).mean(axis=(2, 4))
    return out[0] if single else out


def raw_features(images, factor: int) -> np.ndarray:
    """Flattened block means, ``(n, (H/f)*(W/f))``."""
    pooled = block_mean(np.asarray(images), factor)
    if pooled.ndim == 2:
        return pooled.ravel()
    return pooled.reshape(pooled.shape[0], -1)


def fit_feature_spec(images, downsample: int = 4, min_std: float = 1e-12) -> FeatureSpec:
    """Estimate standardization constants; zero-variance features are dropped."""
    X = raw_features(images, downsample)
    if X.ndim != 2 or X.shape[0] < 2:
        raise InvalidArgument("need at least two images to fit feature standardization")
    std = X.std(axis=0)
    keep = std > min_std
    if not keep.any():
        raise InvalidArgument("every feature has zero variance on the training images")
    return FeatureSpec(downsample=downsample, keep=keep, mean=X[:, keep].mean(axis=0),
                       std=std[keep])


def featurize(images, spec: FeatureSpec) -> np.ndarray:
    """Standardized features of one image ``(H, W)`` or a stack ``(n, H, W)``.

    An unfitted spec returns the raw block means.
    """
    X = raw_features(images, spec.downsample)
    if not spec.fitted:
        return X
    if X.shape[-1] != spec.keep.size:
        raise InvalidArgument(f"image yields {X.shape[-1]} raw features, spec expects {spec.keep.size}")
    return (X[..., spec.keep] - spec.mean) / spec.std


def ridge_solve(X: np.ndarray, T: np.ndarray, lam: float):
    """Solve ``(X'X + lam I) W = X'(T - mean T)`` with an intercept.

    ``X`` must already be centered (standardized features are).  Returns
    ``(W, bias)`` with ``W`` of shape ``(n_features, n_targets)``.

    Raises
    ------
    NumericalFailure
        When the system is singular or too ill-conditioned to trust; the
        message names ``lam`` as the remedy.
    """
    X = np.asarray(X, dtype=float)
    T = np.asarray(T, dtype=float)
    if T.ndim == 1:
        T = T[:, None]
    if X.shape[0] != T.shape[0]:
        raise InvalidArgument(f"{X.shape[0]} feature rows but {T.shape[0]} targets")
    if lam < 0:
        raise InvalidArgument(f"lambda must be >= 0, got {lam}")
    bias = T.mean(axis=0)
    A = X.T @ X + lam * np.eye(X.shape[1])
    B = X.T @ (T - bias)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
            W = scipy.linalg.solve(A, B, assume_a="pos")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, scipy.linalg.LinAlgWarning) as exc:
        raise NumericalFailure(f"normal equations are singular at lambda={lam}; "
                               "increase lambda to regularize", lam=lam) from exc
    return W, bias
