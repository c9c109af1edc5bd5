"""Ridge predictor mapping images to the three random effects.

One model is trained per association-noise level, with empirical-Bayes
estimates as targets.  The model file is a small JSON document; floats are
written with ``repr`` precision so loading reproduces every weight bit for bit.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import features
from .errors import InvalidArgument, UnsupportedVersion
from .features import FeatureSpec

MODEL_FORMAT = "synthlong-ridge"
MODEL_VERSION = 1
DEFAULT_LAMBDA = 1.0
DEFAULT_LAMBDA_GRID = (0.01, 0.1, 1.0, 10.0, 100.0, 1e3, 1e4, 1e5)


@dataclass(frozen=True)
class PredictorModel:
    """Affine map from standardized image features to random effects.

    Attributes
    ----------
    weights : ndarray, shape (k, n_features)
    bias : ndarray, shape (k,)
    lam : float
        Ridge penalty used in training.
    feature_spec : FeatureSpec
        Pooling factor and training standardization constants.
    metadata : dict
        Free-form training provenance (``n``, ``seed``, ``sigma2`` ...).
    """

    weights: np.ndarray
    bias: np.ndarray
    lam: float
    feature_spec: FeatureSpec
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        b = np.asarray(self.bias, dtype=float)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise InvalidArgument(f"inconsistent shapes: weights {w.shape}, bias {b.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise InvalidArgument("model weights must be finite")
        if self.feature_spec.fitted and self.feature_spec.n_features != w.shape[1]:
            raise InvalidArgument(f"weights expect {w.shape[1]} features, spec provides "
                                  f"{self.feature_spec.n_features}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def n_outputs(self) -> int:
        return self.weights.shape[0]


def train(images, targets, lam: float = DEFAULT_LAMBDA, spec: FeatureSpec | int | None = None,
          metadata: dict | None = None) -> PredictorModel:
    """Fit ridge weights from images ``(n, H, W)`` to targets ``(n, k)``.

    Parameters
    ----------
    spec
        A fitted :class:`FeatureSpec` to reuse, an int pooling factor, or
        ``None`` for the default factor.  Unfitted specs are fitted on
        ``images``.

    Raises
    ------
    NumericalFailure
        If the regularized normal equations are singular (typically
        ``lam = 0`` with fewer images than features).
    """
    images = np.asarray(images, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if targets.ndim == 1:
        targets = targets[:, None]
    if images.ndim != 3 or images.shape[0] != targets.shape[0]:
        raise InvalidArgument(f"{images.shape[0] if images.ndim == 3 else '?'} images but "
                              f"{targets.shape[0]} targets")
    if lam < 0:
        raise InvalidArgument(f"lambda must be >= 0, got {lam}")
    if spec is None:
        spec = FeatureSpec()
    elif isinstance(spec, (int, np.integer)):
        spec = FeatureSpec(downsample=int(spec))
    if not spec.fitted:
        spec = features.fit_feature_spec(images, spec.downsample)
    X = features.featurize(images, spec)
    W, bias = features.ridge_solve(X, targets, lam)
    meta = {"n": int(images.shape[0])}
    meta.update(metadata or {})
    return PredictorModel(weights=W.T.copy(), bias=bias, lam=float(lam), feature_spec=spec,
                          metadata=meta)


def predict(model: PredictorModel, img) -> np.ndarray:
    """Predicted random effects for one image ``(H, W)`` -> ``(k,)`` or a stack -> ``(n, k)``."""
    img = np.asarray(img, dtype=float)
    if img.ndim not in (2, 3):
        raise InvalidArgument(f"expected (H, W) or (n, H, W) images, got shape {img.shape}")
    X = features.featurize(img, model.feature_spec)
    if X.shape[-1] != model.weights.shape[1]:
        raise InvalidArgument(f"image yields {X.shape[-1]} features, model expects "
                              f"{model.weights.shape[1]}")
    return X @ model.weights.T + model.bias


def select_lambda(train_images, train_targets, val_images, val_targets,
                  grid: Sequence[float] = DEFAULT_LAMBDA_GRID, downsample: int = 4):
    """Pick the penalty with the smallest validation MSE.

    Standardization is fitted once on the training images and shared by every
    candidate.  Ties go to the earlier grid entry.

    Returns
    -------
    best : float
    scores : dict mapping each lambda to its validation MSE
    """
    if len(grid) == 0:
        raise InvalidArgument("lambda grid is empty")
    spec = features.fit_feature_spec(np.asarray(train_images, dtype=float), downsample)
    val_targets = np.asarray(val_targets, dtype=float)
    scores = {}
    for lam in grid:
        model = train(train_images, train_targets, lam, spec)
        scores[float(lam)] = float(np.mean((predict(model, val_images) - val_targets) ** 2))
    best = min(scores, key=lambda k: (scores[k], list(scores).index(k)))
    return best, scores


# --------------------------------------------------------------------------
# model files

def _spec_to_dict(spec: FeatureSpec) -> dict:
    if not spec.fitted:
        return {"downsample": spec.downsample}
    return {"downsample": spec.downsample,
            "keep": [bool(k) for k in spec.keep],
            "mean": [float(v) for v in spec.mean],
            "std": [float(v) for v in spec.std]}


def _spec_from_dict(d: dict) -> FeatureSpec:
    if "mean" not in d:
        return FeatureSpec(downsample=int(d["downsample"]))
    return FeatureSpec(downsample=int(d["downsample"]), keep=np.asarray(d["keep"], dtype=bool),
                       mean=np.asarray(d["mean"], dtype=float), std=np.asarray(d["std"], dtype=float))


def model_to_json(model: PredictorModel) -> str:
    doc = {"format": MODEL_FORMAT, "version": MODEL_VERSION,
           "shape": list(model.weights.shape), "lambda": model.lam,
           "metadata": model.metadata, "feature_spec": _spec_to_dict(model.feature_spec),
           "bias": [float(v) for v in model.bias],
           "weights": [[float(v) for v in row] for row in model.weights]}
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def model_from_json(text: str) -> PredictorModel:
    doc = json.loads(text)
    if doc.get("format") != MODEL_FORMAT:
        raise InvalidArgument(f"not a predictor model file (format={doc.get('format')!r})")
    if doc.get("version") != MODEL_VERSION:
        raise UnsupportedVersion(f"model file version {doc.get('version')} is not supported "
                                 f"(expected {MODEL_VERSION})")
    W = np.asarray(doc["weights"], dtype=float).reshape(doc["shape"])
    return PredictorModel(weights=W, bias=np.asarray(doc["bias"], dtype=float),
                          lam=float(doc["lambda"]), feature_spec=_spec_from_dict(doc["feature_spec"]),
                          metadata=dict(doc["metadata"]))


def save_model(model: PredictorModel, path) -> Path:
    """Write ``model`` atomically (temporary file then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(model_to_json(model))
    os.replace(tmp, path)
    return path


def load_model(path) -> PredictorModel:
    return model_from_json(Path(path).read_text())
