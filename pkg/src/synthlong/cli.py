"""Command-line entry point.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure,
3 a ``--check`` gate failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import dataio, pipeline
from .config import RunConfig
from .errors import (AcceptanceGateFailure, ChecksumMismatch, InvalidArgument, NumericalFailure,
                     SynthLongError)

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_GATE = 0, 1, 2, 3

COMMANDS = ("generate", "select-dims", "fit-eb", "train", "predict", "evaluate", "pipeline",
            "verify")
# stages that start a run and therefore never take their config from an existing manifest
_STARTERS = ("generate", "select-dims", "pipeline")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _levels(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"levels must be comma-separated numbers: {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--out", type=Path, help="output directory (default: config 'out')")
    common.add_argument("--seed", type=int, help="master seed override")
    common.add_argument("--levels", type=_levels, help="comma-separated sigma2 levels, first must be 0")
    common.add_argument("--subjects", type=int, help="number of subjects override")
    common.add_argument("--workers", type=int, help="worker processes for empirical Bayes")
    common.add_argument("--check", action="store_true",
                        help="exit with status 3 if a gate fails")
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    parser = _Parser(prog="synthlong",
                     description="Synthetic image/longitudinal benchmark with tunable association.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "generate": "sample latents, render images, simulate observations for every level",
        "select-dims": "rank latent dims with both influence methods and pick three",
        "fit-eb": "empirical-Bayes estimates for every subject and level",
        "train": "fit one ridge predictor per level (penalty chosen on validation)",
        "predict": "predict random effects for the test split",
        "evaluate": "metrics, bootstrap intervals and the NLL table",
        "pipeline": "run every stage in order",
        "verify": "check every file against the manifest",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name], description=helps[name])
    return parser


def resolve_config(args) -> RunConfig:
    """Config file (or the run's manifest, or defaults) with flag overrides applied."""
    if args.config is not None:
        cfg = RunConfig.load(args.config)
    elif (args.command not in _STARTERS and args.out is not None
          and (args.out / dataio.MANIFEST_NAME).exists()):
        cfg = pipeline.config_for(args.out)
    else:
        cfg = RunConfig()
    changes = {}
    if args.out is not None:
        changes["out"] = str(args.out)
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.levels is not None:
        changes["levels"] = args.levels
    if args.subjects is not None:
        changes["n_subjects"] = args.subjects
    if args.workers is not None:
        changes["workers"] = args.workers
    return cfg.replace(**changes) if changes else cfg


def _run(args) -> int:
    if args.command == "verify":
        if args.out is None:
            raise InvalidArgument("verify needs --out")
        m = dataio.verify(args.out)
        print(f"ok: {len(m.files)} files verified, config digest {m.config_digest}")
        return EXIT_OK
    cfg = resolve_config(args)
    root = Path(cfg.out)
    if args.command == "select-dims":
        rep = pipeline.select_dims(cfg, root)
        print(json.dumps({"method1_top3": rep["method1"]["top3"],
                          "method2_top3": rep["method2"]["top3"],
                          "agreement": rep["agreement"], "eta_indices": rep["eta_indices"]}))
        if args.check and not rep["agreement"]:
            raise AcceptanceGateFailure("influence methods disagree on the top-3 dims")
    elif args.command == "generate":
        m = pipeline.generate(cfg, root)
        print(f"generated {m.n_subjects} subjects in {root} "
              f"(train/val/test {m.counts['train']}/{m.counts['val']}/{m.counts['test']})")
    elif args.command == "fit-eb":
        summary = pipeline.fit_eb(cfg, root)
        for s2, v in summary.items():
            print(f"sigma2={s2:g}: converged {v['converged_fraction']:.4f} of {v['n']}")
    elif args.command == "train":
        for s2, lam in pipeline.train(cfg, root).items():
            print(f"sigma2={s2:g}: lambda={lam:g}")
    elif args.command == "predict":
        pred = pipeline.predict(cfg, root)
        print(f"predicted {len(next(iter(pred.values())))} test subjects at {len(pred)} levels")
    elif args.command in ("evaluate", "pipeline"):
        fn = pipeline.evaluate if args.command == "evaluate" else pipeline.run_pipeline
        report = fn(cfg, root, args.check)
        print(report.to_text(), end="")
        for k, v in report.extras.get("gates", {}).items():
            print(f"gate {k}: {'pass' if v else 'FAIL'}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return _run(args)
    except AcceptanceGateFailure as exc:
        print(f"gate failure: {exc}", file=sys.stderr)
        return EXIT_GATE
    except NumericalFailure as exc:
        stage = getattr(exc, "stage", None)
        print(f"numerical failure{f' in {stage}' if stage else ''}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InvalidArgument, ChecksumMismatch, SynthLongError) as exc:
        stage = getattr(exc, "stage", None)
        print(f"error{f' in {stage}' if stage else ''}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
