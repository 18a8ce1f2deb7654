"""Command-line interface: simulate, train, detect, diagnose, report.

Exit status: 0 success, 2 input error, 3 numerical trouble or a fit that did
not converge (the flagged model is still written). Set VBSPCA_LOG to a
logging level name (DEBUG, INFO, ...) for more output on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .awe_sim import PRESETS, generate, load_scenario, preset
from .core_data import DataError, atomic_write_text, load_csv, write_csv
from .diagnosis import KINDS
from .linalg_utils import NumericalError
from .monitoring import RULES
from .pipeline import (
    RunConfig,
    build_report,
    dumps,
    load_config,
    load_pipeline,
    report_markdown,
    run_detect,
    run_diagnose,
    save_pipeline,
    train,
)

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
log = logging.getLogger("vbspca")


class InputError(Exception):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for flag, key in (
        ("variant", "variant"),
        ("seed", "seed"),
        ("alpha", "alpha"),
        ("onset", "onset"),
        ("train", "train_csv"),
        ("test", "test_csv"),
        ("model", "model_path"),
        ("out", "out_dir"),
        ("statistic", "statistic"),
        ("tau", "tau"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    lam = getattr(args, "lam", None)
    if lam is not None:
        overrides["lam"] = lam if lam == "cv" else _float(lam, "--lambda")
    return replace(cfg, **overrides) if overrides else cfg


def _float(text, name):
    try:
        return float(text)
    except ValueError:
        raise DataError(f"{name} expects a number or 'cv', got {text!r}") from None


def _need(value, what):
    if value is None:
        raise InputError(f"missing {what}")
    return value


def cmd_simulate(args) -> int:
    if args.preset and args.scenario:
        raise InputError("give either --preset or --scenario, not both")
    if args.preset:
        sc = preset(args.preset, seed=args.seed or 0)
    elif args.scenario:
        sc = load_scenario(args.scenario)
        if args.seed is not None:
            sc = replace(sc, process=replace(sc.process, seed=args.seed))
    else:
        raise InputError("simulate needs --preset or --scenario")
    out = Path(_need(args.out, "--out directory"))
    train_data, test_data = generate(sc)
    write_csv(train_data, out / "normal.csv")
    write_csv(test_data, out / "faulty.csv")
    atomic_write_text(out / "truth.json", dumps(sc.ground_truth() | {"scenario_config": sc.to_dict()}))
    print(f"wrote {out / 'normal.csv'}, {out / 'faulty.csv'}, {out / 'truth.json'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    X = load_csv(_need(cfg.train_csv, "training CSV (--train)"))
    model_path = Path(_need(cfg.model_path, "model path (--model)"))
    pipe, report = train(X, cfg)
    save_pipeline(pipe, model_path)
    out_dir = Path(cfg.out_dir) if cfg.out_dir else model_path.parent
    atomic_write_text(out_dir / "train_report.json", dumps(report))
    print(f"{cfg.variant}: rank {report['rank']}, lambda {report['lambda']:.4g}, converged {report['converged']}")
    if not report["converged"]:
        log.error("model did not converge; flagged model written to %s", model_path)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_detect(args) -> int:
    cfg = _config(args)
    pipe = load_pipeline(_need(cfg.model_path, "model file (--model)"))
    X = load_csv(_need(cfg.test_csv, "test CSV (--test)"))
    res = run_detect(pipe, X, cfg.onset, cfg.statistic)
    out = Path(_need(cfg.out_dir, "--out directory"))
    res.write(out / "detection.csv", out / "detection.json")
    print(f"far {res.far:.4f}  fdr {res.fdr:.4f}  delay {res.detection_delay}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    cfg = _config(args)
    pipe = load_pipeline(_need(cfg.model_path, "model file (--model)"))
    X = load_csv(_need(cfg.test_csv, "test CSV (--test)"))
    out = Path(_need(cfg.out_dir, "--out directory"))
    kinds = KINDS if args.kind == "both" else (args.kind,)
    summary = {}
    for kind in kinds:
        m = run_diagnose(pipe, X, kind)
        m.write(out / f"rbc_{kind}.csv", out / f"rbc_{kind}.json")
        post = slice(cfg.onset - 1, None)
        summary[kind] = m.top_sensors(post, k=5)
        top = summary[kind][0]["tag"] if summary[kind] else "none"
        print(f"{kind}: top post-onset sensor {top}")
    atomic_write_text(out / "diagnosis_summary.json", dumps({"onset": cfg.onset, "top_sensors": summary}))
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(_need(args.run_dir, "run directory"))
    if not run_dir.is_dir():
        raise InputError(f"no such run directory: {run_dir}")
    rep = build_report(run_dir)
    atomic_write_text(run_dir / "report.json", dumps(rep))
    atomic_write_text(run_dir / "report.md", report_markdown(rep))
    print(f"far {rep['far']:.4f}  fdr {rep['fdr']:.4f}  delay {rep['delay']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vbspca", description="Variational Bayesian sparse PCA process monitoring")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate normal and faulty data from a scenario")
    s.add_argument("--preset", choices=PRESETS)
    s.add_argument("--scenario", help="scenario JSON file")
    s.add_argument("--out", help="output directory")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    def common(sp):
        sp.add_argument("--config", help="run config JSON (flags override it)")
        sp.add_argument("--model", help="model file")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="fit the latent model, sparse VAR and control limits")
    common(t)
    t.add_argument("--train", help="training CSV")
    t.add_argument("--variant", choices=("gaussian", "laplace"))
    t.add_argument("--alpha", type=float)
    t.add_argument("--tau", type=int)
    t.add_argument("--lambda", dest="lam", help="lasso penalty or 'cv'")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("detect", help="compute T2/SPE statistics and alarms on test data")
    common(d)
    d.add_argument("--test", help="test CSV")
    d.add_argument("--onset", type=int)
    d.add_argument("--statistic", choices=RULES)
    d.set_defaults(func=cmd_detect)

    g = sub.add_parser("diagnose", help="reconstruction-based contributions per sample and sensor")
    common(g)
    g.add_argument("--test", help="test CSV")
    g.add_argument("--kind", choices=KINDS + ("both",), default="both")
    g.add_argument("--onset", type=int)
    g.set_defaults(func=cmd_diagnose)

    r = sub.add_parser("report", help="aggregate detect/diagnose outputs of a run directory")
    r.add_argument("run_dir", nargs="?")
    r.add_argument("--run-dir", dest="run_dir_flag")
    r.set_defaults(func=cmd_report)
    return p


def _setup_logging():
    level = os.environ.get("VBSPCA_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    if args.command == "report" and getattr(args, "run_dir_flag", None):
        args.run_dir = args.run_dir_flag
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, DataError, FileNotFoundError, IsADirectoryError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
