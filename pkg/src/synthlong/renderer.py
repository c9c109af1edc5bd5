"""Procedural covariate images from latent codes, a linear encoder, and influential-dimension selection.

Images hold two horizontal bands with Gaussian vertical profiles, a crude
stand-in for retinal layers.  Eight latent coordinates drive the geometry:
for each band its vertical position, tilt, curvature and luminance.  Every
other coordinate leaves the pixels untouched, which gives the selection
procedures a known answer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import features
from .errors import InvalidArgument
from .features import FeatureSpec
from .sampling import Stream, subject_normals

FACTORS = ("position", "tilt", "curvature", "luminance")


def _default_gains():
    # rows: bands; columns: position, tilt, curvature, luminance.
    # Band-1 position, band-1 tilt and band-2 position dominate; the other five
    # factors are small enough that the ridge encoder shrinks them measurably.
    return ((0.05, 0.08, 0.02, 0.06),
            (0.045, 0.004, 0.02, 0.06))


@dataclass(frozen=True)
class RenderConfig:
    """Geometry of the two-band renderer.

    ``controlled_dims`` lists the latent indices for band 1 (position, tilt,
    curvature, luminance) followed by band 2 in the same order.  Gains are in
    image-extent units: a unit change of a position coordinate moves the band by
    ``gain * height`` pixels.
    """

    height: int = 64
    width: int = 64
    controlled_dims: tuple[int, ...] = (5, 19, 33, 47, 61, 77, 94, 110)
    gains: tuple[tuple[float, ...], ...] = field(default_factory=_default_gains)
    band_centers: tuple[float, float] = (18.0, 46.0)
    band_widths: tuple[float, float] = (4.0, 4.0)
    band_base: tuple[float, float] = (0.8, 0.6)
    background: float = 0.1

    def __post_init__(self):
        dims = tuple(int(i) for i in self.controlled_dims)
        if len(dims) != 8 or len(set(dims)) != 8 or min(dims) < 0:
            raise InvalidArgument(f"controlled_dims must be 8 distinct non-negative indices, got {dims}")
        gains = np.asarray(self.gains, dtype=float)
        if gains.shape != (2, 4) or not np.all(np.isfinite(gains)):
            raise InvalidArgument("gains must be a finite 2x4 table (band x factor)")
        if not 0 <= self.background < 1:
            raise InvalidArgument("background must lie in [0, 1)")
        if self.height < 1 or self.width < 1:
            raise InvalidArgument("image dimensions must be positive")
        if min(self.band_widths) <= 0:
            raise InvalidArgument("band widths must be positive")
        object.__setattr__(self, "controlled_dims", dims)
        object.__setattr__(self, "gains", tuple(tuple(float(g) for g in row) for row in gains))

    def dim_of(self, band: int, factor: str) -> int:
        return self.controlled_dims[4 * band + FACTORS.index(factor)]

    def displacement_rms(self) -> np.ndarray:
        """RMS pixel displacement of each geometric factor per unit latent change, ``(2, 3)``."""
        x = np.arange(self.width) + 0.5 - self.width / 2
        g = np.asarray(self.gains)
        return np.column_stack([g[:, 0] * self.height,
                                g[:, 1] * np.sqrt(np.mean(x**2)),
                                g[:, 2] * np.sqrt(np.mean((x**2 / self.width) ** 2))])

    def to_dict(self) -> dict:
        return {"height": self.height, "width": self.width,
                "controlled_dims": list(self.controlled_dims),
                "gains": [list(r) for r in self.gains],
                "band_centers": list(self.band_centers), "band_widths": list(self.band_widths),
                "band_base": list(self.band_base), "background": self.background}

    @classmethod
    def from_dict(cls, d: dict) -> "RenderConfig":
        d = dict(d)
        for key in ("controlled_dims", "band_centers", "band_widths", "band_base"):
            if key in d:
                d[key] = tuple(d[key])
        if "gains" in d:
            d["gains"] = tuple(tuple(r) for r in d["gains"])
        return cls(**d)


def _check_latents(Z, cfg: RenderConfig) -> np.ndarray:
    Z = np.asarray(Z, dtype=float)
    if Z.shape[-1] < max(cfg.controlled_dims) + 1:
        raise InvalidArgument(f"latent dimension {Z.shape[-1]} too small for controlled dims "
                              f"{cfg.controlled_dims}")
    return Z


def render_batch(Z, cfg: RenderConfig = RenderConfig(), chunk: int = 1024) -> np.ndarray:
    """Render a stack of latents ``(n, d)`` into images ``(n, H, W)`` with values in [0, 1]."""
    Z = np.atleast_2d(_check_latents(Z, cfg))
    H, W = cfg.height, cfg.width
    y = (np.arange(H) + 0.5)[None, :, None]
    x = np.arange(W) + 0.5 - W / 2
    out = np.empty((Z.shape[0], H, W))
    for start in range(0, Z.shape[0], chunk):
        zc = Z[start:start + chunk][:, list(cfg.controlled_dims)]
        img = np.full((zc.shape[0], H, W), cfg.background)
        for b in range(2):
            s_pos, s_tilt, s_curv, s_lum = cfg.gains[b]
            z_pos, z_tilt, z_curv, z_lum = (zc[:, 4 * b + k][:, None] for k in range(4))
            center = (cfg.band_centers[b] + s_pos * z_pos * H + s_tilt * z_tilt * x
                      + s_curv * z_curv * x**2 / W)
            lum = cfg.band_base[b] * expit(s_lum * z_lum)
            w = cfg.band_widths[b]
            img += lum[:, :, None] * np.exp(-(y - center[:, None, :]) ** 2 / (2 * w * w))
        out[start:start + chunk] = np.clip(img, 0.0, 1.0)
    return out


def pixel_sensitivity(cfg: RenderConfig = RenderConfig(), step: float = 1e-4) -> np.ndarray:
    """Mean squared pixel derivative at ``z = 0`` for each controlled dim, in ``controlled_dims`` order.

    This puts geometric and luminance factors on one scale, so it defines the
    gain-dominant dimensions independently of either selection method.
    """
    d = max(cfg.controlled_dims) + 1
    out = np.empty(len(cfg.controlled_dims))
    for k, i in enumerate(cfg.controlled_dims):
        zp = np.zeros(d)
        zm = np.zeros(d)
        zp[i], zm[i] = step, -step
        out[k] = np.mean(((render_batch(zp[None], cfg) - render_batch(zm[None], cfg)) / (2 * step)) ** 2)
    return out


def dominant_dims(cfg: RenderConfig = RenderConfig(), k: int = 3) -> tuple[int, ...]:
    """The ``k`` controlled dims with the largest :func:`pixel_sensitivity`, most sensitive first."""
    s = pixel_sensitivity(cfg)
    order = np.lexsort((np.asarray(cfg.controlled_dims), -s))
    return tuple(int(cfg.controlled_dims[j]) for j in order[:k])


def render(z, cfg: RenderConfig = RenderConfig()) -> np.ndarray:
    """Render one latent vector into an ``(H, W)`` image."""
    z = np.asarray(z, dtype=float)
    if z.ndim != 1:
        raise InvalidArgument("render expects a single latent vector; use render_batch")
    return render_batch(z[None], cfg)[0]


# --------------------------------------------------------------------------
# linear encoder

@dataclass(frozen=True)
class EncoderModel:
    weights: np.ndarray          # (d, n_features)
    bias: np.ndarray             # (d,)
    spec: FeatureSpec
    train_residual: float
    lam: float
    image_shape: tuple[int, int]


def fit_encoder(images, latents, lam: float = 1.0, downsample: int = 4) -> EncoderModel:
    """Ridge regression from standardized block-mean features to every latent coordinate."""
    images = np.asarray(images, dtype=float)
    latents = np.atleast_2d(np.asarray(latents, dtype=float))
    if images.ndim != 3 or images.shape[0] != latents.shape[0]:
        raise InvalidArgument(f"{images.shape[0] if images.ndim == 3 else '?'} images but "
                              f"{latents.shape[0]} latents")
    spec = features.fit_feature_spec(images, downsample)
    if images.shape[0] < spec.n_features:
        raise InvalidArgument(f"need at least {spec.n_features} pairs, got {images.shape[0]}")
    X = features.featurize(images, spec)
    W, bias = features.ridge_solve(X, latents, lam)
    resid = float(np.mean((X @ W + bias - latents) ** 2))
    return EncoderModel(weights=W.T.copy(), bias=bias, spec=spec, train_residual=resid,
                        lam=float(lam), image_shape=images.shape[1:])


def encode(img, enc: EncoderModel) -> np.ndarray:
    """Approximate latent(s) of an image ``(H, W)`` or a stack ``(n, H, W)``."""
    img = np.asarray(img, dtype=float)
    if img.shape[-2:] != enc.image_shape:
        raise InvalidArgument(f"image shape {img.shape[-2:]} does not match encoder {enc.image_shape}")
    return features.featurize(img, enc.spec) @ enc.weights.T + enc.bias


def fit_default_encoder(cfg: RenderConfig, d: int, n: int = 2000, lam: float = 1.0,
                        seed: int = 0, downsample: int = 4) -> EncoderModel:
    """Fit an encoder on ``n`` freshly rendered pairs."""
    Z = subject_normals(seed, (Stream.ENCODER,), np.arange(n), d)
    return fit_encoder(render_batch(Z, cfg), Z, lam, downsample)


# --------------------------------------------------------------------------
# influential-dimension selection

@dataclass(frozen=True)
class InfluenceRanking:
    per_dim_score: np.ndarray
    ranked_dims: np.ndarray
    method: str

    def top(self, k: int = 3) -> tuple[int, ...]:
        return tuple(int(i) for i in self.ranked_dims[:k])


def _rank(scores: np.ndarray, descending: bool) -> np.ndarray:
    # lexsort: last key is primary; lower index wins ties
    idx = np.arange(scores.size)
    key = -scores if descending else scores
    return np.lexsort((idx, key))


def method1_influence(n: int, cfg: RenderConfig, enc: EncoderModel, seed: int = 0) -> InfluenceRanking:
    """Rank dimensions by how well they survive a render/encode round trip (small MSE first)."""
    if n < 1:
        raise InvalidArgument(f"n must be >= 1, got {n}")
    d = enc.weights.shape[0]
    Z = subject_normals(seed, (Stream.METHOD1,), np.arange(n), d)
    Z_hat = encode(render_batch(Z, cfg), enc)
    mse = np.mean((Z - Z_hat) ** 2, axis=0)
    return InfluenceRanking(per_dim_score=mse, ranked_dims=_rank(mse, descending=False),
                            method="method1")


def method2_influence(n: int, cfg: RenderConfig, d: int, seed: int = 0,
                      skip_uncontrolled: bool = True) -> InfluenceRanking:
    """Rank dimensions by the image change caused by resampling one coordinate (large first).

    ``skip_uncontrolled=False`` renders the perturbed images for every
    dimension instead of relying on the renderer reading only controlled ones.
    """
    if n < 1:
        raise InvalidArgument(f"n must be >= 1, got {n}")
    _check_latents(np.zeros(d), cfg)
    draws = subject_normals(seed, (Stream.METHOD2,), np.arange(n), 2 * d)
    base, repl = draws[:, :d], draws[:, d:]
    base_img = render_batch(base, cfg)
    scores = np.zeros(d)
    controlled = set(cfg.controlled_dims)
    for i in range(d):
        if skip_uncontrolled and i not in controlled:
            # render reads only the controlled coordinates, so both images coincide
            continue
        alt = base.copy()
        alt[:, i] = repl[:, i]
        scores[i] = np.mean((render_batch(alt, cfg) - base_img) ** 2)
    return InfluenceRanking(per_dim_score=scores, ranked_dims=_rank(scores, descending=True),
                            method="method2")
