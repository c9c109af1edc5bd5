"""Pipeline stages operating on an output directory.

Every stage reads its inputs from disk, writes its outputs atomically and then
re-commits the manifest, so each one can be rerun on its own and running the
stages one after another gives the same tree as :func:`run_pipeline`.
Nothing written depends on wall-clock time or on the output path.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import dataio, estimation, evaluation, nlme, predictor, renderer, sampling
from .config import RunConfig
from .errors import AcceptanceGateFailure, InvalidArgument, NumericalFailure
from .sampling import Stream, subject_normals

log = logging.getLogger("synthlong")

STAGES = ("select-dims", "generate", "fit-eb", "train", "predict", "evaluate")
_RENDER_CHUNK = 500


def _json(obj) -> str:
    return json.dumps(evaluation._jsonable(obj), indent=1, sort_keys=True) + "\n"


def _new_manifest(cfg: RunConfig) -> dataio.Manifest:
    return dataio.Manifest(schema_version=dataio.SCHEMA_VERSION, seed=cfg.seed,
                           config_digest=cfg.digest(), config=cfg.to_dict(provenance_only=True),
                           n_subjects=0, counts={"train": 0, "val": 0, "test": 0},
                           levels=list(cfg.levels), eta_indices=[], files={}, stages=[])


def _open_manifest(cfg: RunConfig, root: Path) -> dataio.Manifest:
    if (root / dataio.MANIFEST_NAME).exists():
        m = dataio.load_manifest(root)
        if m.config_digest != cfg.digest():
            raise InvalidArgument(f"{root} was produced with config digest {m.config_digest[:12]}, "
                                  f"current config has {cfg.digest()[:12]}")
        return m
    return _new_manifest(cfg)


def _open_dataset(cfg: RunConfig, root: Path) -> dataio.Dataset:
    """Verified dataset handle; refuses a run produced under a different config."""
    if not (root / dataio.MANIFEST_NAME).exists():
        raise InvalidArgument(f"no dataset at {root}; run generate first")
    _open_manifest(cfg, root)
    return dataio.read_dataset(root)


def _commit(root: Path, manifest: dataio.Manifest, stage: str) -> dataio.Manifest:
    # keep the canonical stage order so reruns and partial runs agree
    done = set(manifest.stages) | {stage}
    manifest.stages = [s for s in STAGES if s in done]
    return dataio.commit_manifest(root, manifest)


def config_for(root, cfg: RunConfig | None = None) -> RunConfig:
    """The run config recorded in ``root``'s manifest (``cfg`` supplies ``out``/``workers``)."""
    root = Path(root)
    m = dataio.load_manifest(root)
    stored = RunConfig.from_dict(m.config)
    extra = {"out": str(root)}
    if cfg is not None:
        extra["workers"] = cfg.workers
    return stored.replace(**extra)


# --------------------------------------------------------------------------
# select-dims

def select_dims(cfg: RunConfig, root=None) -> dict:
    """Fit the encoder, run both influence methods and record the chosen indices."""
    root = Path(root or cfg.out)
    rc = cfg.render
    log.info("select-dims: fitting encoder on %d rendered pairs", cfg.encoder_n)
    enc = renderer.fit_default_encoder(rc, cfg.latent_dim, cfg.encoder_n, cfg.encoder_lambda,
                                       cfg.seed, cfg.feature_downsample)
    m1 = renderer.method1_influence(cfg.method1_n, rc, enc, cfg.seed)
    m2 = renderer.method2_influence(cfg.method2_n, rc, cfg.latent_dim, cfg.seed)
    top1, top2 = m1.top(3), m2.top(3)
    report = {
        "method1": {"scores": m1.per_dim_score, "top3": list(top1)},
        "method2": {"scores": m2.per_dim_score, "top3": list(top2)},
        "agreement": set(top1) == set(top2),
        "gain_dominant": list(renderer.dominant_dims(rc)),
        "eta_indices": list(top2),
        "encoder": {"lambda": cfg.encoder_lambda, "train_residual": enc.train_residual},
    }
    root.mkdir(parents=True, exist_ok=True)
    dataio.atomic_write_text(root / "selection.json", _json(report))
    manifest = _open_manifest(cfg, root)
    manifest.eta_indices = list(top2)
    _commit(root, manifest, "select-dims")
    log.info("select-dims: method1 %s, method2 %s, agreement %s", top1, top2, report["agreement"])
    return report


def _selection(root: Path) -> dict:
    p = root / "selection.json"
    if not p.exists():
        raise InvalidArgument(f"{p} is missing; run select-dims first")
    return json.loads(p.read_text())


# --------------------------------------------------------------------------
# generate

def observation_noise(ids, n_times: int, seed: int, level_index: int) -> np.ndarray:
    """Standard-normal residual draws ``(n, J)`` from each subject's observation stream."""
    return subject_normals(seed, (Stream.OBSERVE, level_index), ids, n_times)


def random_baseline(ids, seed: int, level_index: int) -> np.ndarray:
    """Fresh ``N(0, I_3)`` effects per subject and level, used as the random NLL baseline."""
    return subject_normals(seed, (Stream.RANDOM_BASELINE, level_index), ids,
                           sampling.N_RANDOM_EFFECTS)


def generate(cfg: RunConfig, root=None) -> dataio.Manifest:
    """Latents, images, random effects per level, observations, splits and the manifest."""
    root = Path(root or cfg.out)
    if not (root / "selection.json").exists():
        select_dims(cfg, root)
    chosen = [int(i) for i in _selection(root)["eta_indices"]]
    n = cfg.n_subjects
    ids = np.arange(n, dtype=np.int64)
    times = cfg.times
    Z = sampling.sample_latents(n, cfg.latent_dim, cfg.seed) if n else np.empty((0, cfg.latent_dim))
    log.info("generate: rendering %d images", n)
    for start in range(0, n, _RENDER_CHUNK):
        imgs = renderer.render_batch(Z[start:start + _RENDER_CHUNK], cfg.render)
        for i, img in zip(ids[start:start + _RENDER_CHUNK], imgs):
            dataio.write_pgm(root / dataio.image_name(i), img)
    eta = sampling.extract_etas(Z, chosen) if n else np.empty((0, 3))
    eta_hat, obs = {}, {}
    for li, s2 in enumerate(cfg.levels):
        eta_hat[s2] = sampling.perturb_etas(eta, ids, s2, cfg.seed, li)
        if n:
            C = nlme.simulate_concentrations(eta_hat[s2], grid=times)
            obs[s2] = C + cfg.sigma_eps * observation_noise(ids, times.size, cfg.seed, li)
        else:
            obs[s2] = np.empty((0, times.size))
        log.info("generate: sigma2=%g simulated", s2)
    splits = dataio.split(ids, cfg.split, cfg.seed) if n >= 3 else None
    manifest = _open_manifest(cfg, root)
    manifest.eta_indices = chosen
    dataio.write_dataset(root, ids, Z, None, eta, eta_hat, obs, times, manifest, splits)
    return _commit(root, manifest, "generate")


# --------------------------------------------------------------------------
# fit-eb

EB_COLUMNS = ["sigma2", "eta1", "eta2", "eta3", "objective", "converged", "n_evals"]


def _eb_chunk(args):
    ids, times, y, sigma2, sigma_eps, n_polish = args
    opts = estimation.OptimizerOptions(n_polish=n_polish)
    out = np.empty((len(ids), len(EB_COLUMNS)))
    for k, i in enumerate(ids):
        r = estimation.empirical_bayes(nlme.ObservationSet(int(i), sigma2, times, y[k]),
                                       sigma_eps=sigma_eps, opts=opts)
        out[k] = (sigma2, *r.eta_approx, r.objective, float(r.converged), float(r.n_evals))
    return out


def _eb_level(ids, times, y, sigma2, cfg: RunConfig) -> np.ndarray:
    if cfg.workers == 1 or len(ids) < 2 * cfg.workers:
        return _eb_chunk((ids, times, y, sigma2, cfg.sigma_eps, cfg.n_polish))
    bounds = np.linspace(0, len(ids), 4 * cfg.workers + 1).astype(int)
    jobs = [(ids[a:b], times, y[a:b], sigma2, cfg.sigma_eps, cfg.n_polish)
            for a, b in zip(bounds[:-1], bounds[1:])]
    with ProcessPoolExecutor(cfg.workers) as pool:
        return np.concatenate(list(pool.map(_eb_chunk, jobs)))


def fit_eb(cfg: RunConfig, root=None) -> dict:
    """Empirical-Bayes estimates for every subject and level.

    Raises
    ------
    NumericalFailure
        If the converged fraction at any level falls below ``cfg.min_converged``
        (the estimates are still written).
    """
    root = Path(root or cfg.out)
    ds = _open_dataset(cfg, root)
    summary = {}
    for s2 in cfg.levels:
        ids, times, y = ds.observations(s2)
        log.info("fit-eb: sigma2=%g, %d subjects", s2, len(ids))
        res = (_eb_level(ids, times, y, s2, cfg) if len(ids)
               else np.empty((0, len(EB_COLUMNS))))
        dataio.write_table(root / "eb" / f"{dataio.level_name(s2)}.csv", ids, res, EB_COLUMNS)
        conv_flags = res[:, EB_COLUMNS.index("converged")]
        summary[s2] = {"n": int(len(ids)),
                       "converged_fraction": float(np.mean(conv_flags)) if len(ids) else 1.0,
                       "not_converged": int(len(ids) - np.sum(conv_flags))}
    dataio.atomic_write_text(root / "eb" / "summary.json",
                             _json({dataio.level_name(k): v for k, v in summary.items()}))
    _commit(root, ds.manifest, "fit-eb")
    bad = {s2: v["not_converged"] for s2, v in summary.items()
           if v["converged_fraction"] < cfg.min_converged}
    if bad:
        raise NumericalFailure("empirical Bayes convergence below threshold",
                               not_converged=bad, threshold=cfg.min_converged)
    return summary


def read_eb(root, sigma2: float):
    """``(ids, eta_approx (n, 3))`` from the level's empirical-Bayes file."""
    p = Path(root) / "eb" / f"{dataio.level_name(sigma2)}.csv"
    if not p.exists():
        raise InvalidArgument(f"empirical-Bayes targets for sigma2={sigma2} are missing ({p})")
    ids, values, cols = dataio.read_table(p)
    return ids, values[:, [cols.index(c) for c in ("eta1", "eta2", "eta3")]]


# --------------------------------------------------------------------------
# train / predict

def _rows_for(ids_all: np.ndarray, wanted: np.ndarray) -> np.ndarray:
    pos = {int(i): k for k, i in enumerate(ids_all)}
    return np.array([pos[int(i)] for i in wanted], dtype=np.int64)


def train(cfg: RunConfig, root=None) -> dict:
    """One ridge model per level, penalty chosen on the validation split."""
    root = Path(root or cfg.out)
    ds = _open_dataset(cfg, root)
    sp = ds.splits()
    tr_img = ds.images(sp["train"])
    va_img = ds.images(sp["val"])
    chosen = {}
    for s2 in cfg.levels:
        eb_ids, eb = read_eb(root, s2)
        t_tr = eb[_rows_for(eb_ids, sp["train"])]
        t_va = eb[_rows_for(eb_ids, sp["val"])]
        lam, scores = predictor.select_lambda(tr_img, t_tr, va_img, t_va, cfg.lambda_grid,
                                              cfg.feature_downsample)
        model = predictor.train(tr_img, t_tr, lam, cfg.feature_downsample,
                                metadata={"seed": cfg.seed, "sigma2": s2,
                                          "validation_mse": {format(k, "g"): v
                                                             for k, v in scores.items()}})
        (root / "models").mkdir(parents=True, exist_ok=True)
        predictor.save_model(model, root / "models" / f"{dataio.level_name(s2)}.json")
        chosen[s2] = lam
        log.info("train: sigma2=%g lambda=%g", s2, lam)
    _commit(root, ds.manifest, "train")
    return chosen


def predict(cfg: RunConfig, root=None) -> dict:
    """Predictions on the test split for every level."""
    root = Path(root or cfg.out)
    ds = _open_dataset(cfg, root)
    test = ds.splits()["test"]
    imgs = ds.images(test)
    out = {}
    for s2 in cfg.levels:
        p = root / "models" / f"{dataio.level_name(s2)}.json"
        if not p.exists():
            raise InvalidArgument(f"model for sigma2={s2} is missing ({p}); run train first")
        pred = predictor.predict(predictor.load_model(p), imgs)
        dataio.write_table(root / "predictions" / f"{dataio.level_name(s2)}.csv", test, pred,
                           ["eta1", "eta2", "eta3"])
        out[s2] = pred
    _commit(root, ds.manifest, "predict")
    return out


# --------------------------------------------------------------------------
# evaluate

def evaluation_inputs(cfg: RunConfig, root) -> dict[float, evaluation.LevelArtifacts]:
    """Assemble test-split arrays and per-subject conditional NLL columns for every level."""
    root = Path(root)
    ds = _open_dataset(cfg, root)
    test = ds.splits()["test"]
    rows = ds.rows(test)
    times = cfg.times
    reference = nlme.simulate_concentrations(ds.eta()[rows], grid=times)
    arts = {}
    for li, s2 in enumerate(cfg.levels):
        p = root / "predictions" / f"{dataio.level_name(s2)}.csv"
        if not p.exists():
            raise InvalidArgument(f"predictions for sigma2={s2} are missing; run predict first")
        pid, pred, _ = dataio.read_table(p)
        pred = pred[_rows_for(pid, test)]
        eb_ids, eb = read_eb(root, s2)
        approx = eb[_rows_for(eb_ids, test)]
        oid, _, y = ds.observations(s2)
        observed = y[_rows_for(oid, test)]
        nll = estimation.nll_columns(reference, observed, pred, approx,
                                     random_baseline(test, cfg.seed, li), cfg.sigma_eps, times)
        arts[s2] = evaluation.LevelArtifacts(s2, ds.eta_hat(s2)[rows], pred, approx, nll)
    return arts


def gates(report: evaluation.EvalReport, eb_summary: dict | None, selection: dict | None) -> dict:
    """Pass/fail flags for the checks enforced by ``--check``."""
    lv = report.levels
    r2p = [report.row(s, "eta_hat~eta_pred").r2 for s in lv]
    r2a = [report.row(s, "eta_hat~eta_approx").r2 for s in lv]
    out = {
        "r2_strictly_decreasing": all(b < a for a, b in zip(r2p, r2p[1:])),
        "fraction_of_max_ge_0.5": all(report.row(s, "eta_hat~eta_pred").fraction_of_max >= 0.5
                                      for s in lv if s <= 18),
        "eta_approx_r2_constant": (max(r2a) - min(r2a)) < 0.02,
    }
    if report.nll:
        out["nll_predicted_lt_average_lt_random"] = all(
            s.means["predicted"] < s.means["average"] < s.means["random"] for s in report.nll)
    if eb_summary is not None:
        out["eb_converged"] = all(v["converged_fraction"] >= 0.99 for v in eb_summary.values())
    if selection is not None:
        out["selection_agreement"] = bool(selection["agreement"])
    return out


def evaluate(cfg: RunConfig, root=None, check: bool = False) -> evaluation.EvalReport:
    """Build the report; with ``check`` raise :class:`AcceptanceGateFailure` on any failed gate."""
    root = Path(root or cfg.out)
    arts = evaluation_inputs(cfg, root)
    report = evaluation.build_report(arts, cfg.levels, cfg.seed, cfg.digest(),
                                     cfg.bootstrap_resamples)
    eb_path = root / "eb" / "summary.json"
    eb_summary = json.loads(eb_path.read_text()) if eb_path.exists() else None
    sel = _selection(root) if (root / "selection.json").exists() else None
    report.extras["gates"] = gates(report, eb_summary, sel)
    dataio.atomic_write_text(root / "report.json", report.to_json())
    dataio.atomic_write_text(root / "report.txt", report.to_text())
    _commit(root, dataio.load_manifest(root), "evaluate")
    failed = [k for k, v in report.extras["gates"].items() if not v]
    if check and failed:
        raise AcceptanceGateFailure(f"gates failed: {', '.join(failed)}")
    return report


def run_pipeline(cfg: RunConfig, root=None, check: bool = False) -> evaluation.EvalReport:
    """All stages in order; the first failure propagates with the stage name attached."""
    root = Path(root or cfg.out)
    steps = [("select-dims", lambda: select_dims(cfg, root)),
             ("generate", lambda: generate(cfg, root)),
             ("fit-eb", lambda: fit_eb(cfg, root)),
             ("train", lambda: train(cfg, root)),
             ("predict", lambda: predict(cfg, root)),
             ("evaluate", lambda: evaluate(cfg, root, check))]
    result = None
    for name, step in steps:
        try:
            result = step()
        except Exception as exc:
            exc.stage = name
            log.error("stage %s failed: %s", name, exc)
            raise
    return result
