"""Run configuration: every knob of the pipeline in one JSON-serializable object."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import SplitSpec
from .errors import InvalidArgument
from .estimation import OptimizerOptions
from .nlme import DEFAULT_SIGMA_EPS
from .predictor import DEFAULT_LAMBDA_GRID
from .renderer import RenderConfig
from .sampling import DEFAULT_LATENT_DIM, DEFAULT_LEVELS, NoiseLevelSet


@dataclass(frozen=True)
class RunConfig:
    """Inputs that fully determine a pipeline run.

    ``out`` and ``workers`` affect where and how fast things run but not what
    is produced, so they are left out of :meth:`digest`.
    """

    latent_dim: int = DEFAULT_LATENT_DIM
    n_subjects: int = 5000
    levels: tuple[float, ...] = DEFAULT_LEVELS
    sigma_eps: float = DEFAULT_SIGMA_EPS
    n_times: int = 21
    time_spacing: float = 0.5
    render: RenderConfig = field(default_factory=RenderConfig)
    encoder_n: int = 2000
    encoder_lambda: float = 1.0
    method1_n: int = 2000
    method2_n: int = 2000
    feature_downsample: int = 4
    lambda_grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID
    split: SplitSpec = field(default_factory=SplitSpec)
    n_polish: int = 4
    bootstrap_resamples: int = 1000
    min_converged: float = 0.99
    seed: int = 0
    out: str = "run"
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "levels", NoiseLevelSet(tuple(self.levels)).levels)
        object.__setattr__(self, "lambda_grid", tuple(float(v) for v in self.lambda_grid))
        if self.latent_dim < max(self.render.controlled_dims) + 1:
            raise InvalidArgument(f"latent_dim={self.latent_dim} is smaller than the largest "
                                  f"controlled dim + 1")
        if self.n_subjects < 0:
            raise InvalidArgument("n_subjects must be >= 0")
        if self.sigma_eps <= 0:
            raise InvalidArgument("sigma_eps must be positive")
        if self.n_times < 1 or self.time_spacing <= 0:
            raise InvalidArgument("time grid needs n_times >= 1 and a positive spacing")
        if min(self.encoder_n, self.method1_n, self.method2_n) < 1:
            raise InvalidArgument("selection sample sizes must be >= 1")
        if not self.lambda_grid or min(self.lambda_grid) < 0:
            raise InvalidArgument("lambda grid must be non-empty and non-negative")
        if self.seed < 0:
            raise InvalidArgument("seed must be >= 0")
        if self.workers < 1:
            raise InvalidArgument("workers must be >= 1")
        if not 0 <= self.min_converged <= 1:
            raise InvalidArgument("min_converged must lie in [0, 1]")

    @property
    def times(self) -> np.ndarray:
        return self.time_spacing * np.arange(1, self.n_times + 1, dtype=float)

    @property
    def optimizer(self) -> OptimizerOptions:
        return OptimizerOptions(n_polish=self.n_polish)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self, provenance_only: bool = False) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["levels"] = list(self.levels)
        d["lambda_grid"] = list(self.lambda_grid)
        d["render"] = self.render.to_dict()
        d["split"] = self.split.to_dict()
        if provenance_only:
            d.pop("out")
            d.pop("workers")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InvalidArgument(f"unknown config keys: {unknown}")
        if "render" in d:
            d["render"] = RenderConfig.from_dict(d["render"])
        if "split" in d:
            d["split"] = SplitSpec.from_dict(d["split"])
        for key in ("levels", "lambda_grid"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidArgument(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON of the output-determining fields."""
        text = json.dumps(self.to_dict(provenance_only=True), sort_keys=True,
                          separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()
