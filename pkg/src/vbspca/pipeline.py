"""End-to-end train / detect / diagnose composition and the model container."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .core_data import DataError, DataMatrix, Scaler, apply_scaler, atomic_write_text, fit_scaler
from .diagnosis import KINDS, RbcMap, rbc_map
from .gaussian import GaussianHyper, GaussianModel, fit_gaussian
from .laplace import LaplaceHyper, LaplaceModel, fit_laplace
from .monitoring import RULES, DetectionResult, MonitorProfile, calibrate, detect, rates
from .sparse_var import VarModel, build_lagged, lasso_fit, select_lambda

log = logging.getLogger(__name__)

SCHEMA = "vbspca-pipeline/1"
VARIANTS = ("gaussian", "laplace")


@dataclass(frozen=True)
class RunConfig:
    variant: str = "gaussian"
    train_csv: Optional[str] = None
    test_csv: Optional[str] = None
    model_path: Optional[str] = None
    out_dir: Optional[str] = None
    gaussian: dict = field(default_factory=dict)
    laplace: dict = field(default_factory=dict)
    tau: int = 2
    lam: Union[str, float] = "cv"
    alpha: float = 0.95
    onset: int = 201
    statistic: str = "spe"
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DataError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0.0 < self.alpha < 1.0:
            raise DataError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.tau < 1:
            raise DataError("tau must be >= 1")
        if self.statistic not in RULES:
            raise DataError(f"statistic must be one of {RULES}")
        if not (self.lam == "cv" or (isinstance(self.lam, (int, float)) and self.lam >= 0)):
            raise DataError("lambda must be 'cv' or a non-negative number")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise DataError("config must be a JSON object")
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def gaussian_hyper(self) -> GaussianHyper:
        try:
            return GaussianHyper(**self.gaussian)
        except (TypeError, ValueError) as exc:
            raise DataError(f"bad gaussian hyperparameters: {exc}") from None

    def laplace_hyper(self) -> LaplaceHyper:
        try:
            return LaplaceHyper(**self.laplace)
        except (TypeError, ValueError) as exc:
            raise DataError(f"bad laplace hyperparameters: {exc}") from None


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return RunConfig.from_dict(json.load(fh))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


@dataclass(frozen=True)
class Pipeline:
    variant: str
    scaler: Scaler
    model: Union[GaussianModel, LaplaceModel]
    var: VarModel
    profile: MonitorProfile
    seed: int = 0
    cv: dict = field(default_factory=dict)

    @property
    def loading(self) -> np.ndarray:
        return self.model.loading

    @property
    def converged(self) -> bool:
        return bool(self.model.converged)

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "variant": self.variant,
            "seed": self.seed,
            "scaler": self.scaler.to_dict(),
            "model": self.model.to_dict(),
            "var": self.var.to_dict(),
            "profile": self.profile.to_dict(),
            "cv": self.cv,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Pipeline":
        if d.get("schema") != SCHEMA:
            raise DataError(f"expected schema {SCHEMA!r}, got {d.get('schema')!r}")
        model_cls = GaussianModel if d["variant"] == "gaussian" else LaplaceModel
        return cls(
            variant=d["variant"],
            scaler=Scaler.from_dict(d["scaler"]),
            model=model_cls.from_dict(d["model"]),
            var=VarModel.from_dict(d["var"]),
            profile=MonitorProfile.from_dict(d["profile"]),
            seed=int(d.get("seed", 0)),
            cv=d.get("cv", {}),
        )


def dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n"


def save_pipeline(p: Pipeline, path) -> None:
    atomic_write_text(path, dumps(p.to_dict()))


def load_pipeline(path) -> Pipeline:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such model file: {path}")
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc.msg})") from None
    try:
        return Pipeline.from_dict(d)
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed model file ({exc})") from None


def fit_latent_model(X: DataMatrix, cfg: RunConfig):
    if cfg.variant == "gaussian":
        return fit_gaussian(X, cfg.gaussian_hyper(), seed=cfg.seed)
    return fit_laplace(X, cfg.laplace_hyper(), seed=cfg.seed)


def train(X_raw: DataMatrix, cfg: RunConfig) -> tuple[Pipeline, dict]:
    """Standardize, fit the latent model, the sparse VAR and the control limits."""
    scaler = fit_scaler(X_raw)
    X = apply_scaler(scaler, X_raw)
    model = fit_latent_model(X, cfg)
    T = model.loading.T @ X.values
    design = build_lagged(T, cfg.tau)
    cv = {}
    if cfg.lam == "cv":
        lam, grid, errors = select_lambda(design)
        cv = {"grid": grid.tolist(), "errors": errors.tolist()}
    else:
        lam = float(cfg.lam)
    var = lasso_fit(design, lam)
    profile = calibrate(model.loading, var, X, cfg.alpha)
    pipe = Pipeline(cfg.variant, scaler, model, var, profile, cfg.seed, cv)
    report = {
        "variant": cfg.variant,
        "rank": int(model.rank),
        "converged": bool(model.converged),
        "n_iter": int(model.n_iter),
        "noise_precision": float(model.noise_precision),
        "lambda": float(lam),
        "tau": cfg.tau,
        "alpha": cfg.alpha,
        "t2_limit": profile.t2_limit,
        "spe_limit": profile.spe_limit,
        "n_train": X.n,
        "seed": cfg.seed,
    }
    if cfg.variant == "gaussian":
        report["elbo_trace"] = [float(v) for v in model.elbo_trace]
    else:
        report["change_trace"] = [float(v) for v in model.change_trace]
    return pipe, report


def run_detect(p: Pipeline, X_raw: DataMatrix, onset: int = 201, statistic: str = "spe") -> DetectionResult:
    X = apply_scaler(p.scaler, X_raw)
    return detect(p.profile, p.loading, p.var, X, onset, statistic)


def run_diagnose(p: Pipeline, X_raw: DataMatrix, kind: str = "SPE") -> RbcMap:
    if kind not in KINDS:
        raise DataError(f"kind must be one of {KINDS}")
    X = apply_scaler(p.scaler, X_raw)
    return rbc_map(X, p.loading, p.profile.lambda_diag, kind)


def _read_detection_csv(path: Path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"{path}: no rows")
    valid = np.array([r["phase"] != "warmup" for r in rows])
    t2 = np.array([r["t2_alarm"] == "1" for r in rows])
    spe = np.array([r["spe_alarm"] == "1" for r in rows])
    return {"valid": valid, "t2": t2, "spe": spe}


def _read_rbc_json(path: Path) -> RbcMap:
    d = json.loads(path.read_text(encoding="utf-8"))
    values = np.array([[np.nan if v is None else v for v in row] for row in d["values"]], float)
    return RbcMap(values.reshape(len(d["samples"]), len(d["tags"])), d["kind"], tuple(d["tags"]))


def build_report(run_dir) -> dict:
    """Aggregate detection metrics (recomputed from the CSV) and top RBC sensors per fault phase."""
    run_dir = Path(run_dir)
    det_json = run_dir / "detection.json"
    det_csv = run_dir / "detection.csv"
    if not det_json.is_file() or not det_csv.is_file():
        raise DataError(f"{run_dir}: detection.csv / detection.json not found")
    summary = json.loads(det_json.read_text(encoding="utf-8"))
    onset = int(summary["onset"])
    alarms = _read_detection_csv(det_csv)
    recomputed = {
        "t2": rates(alarms["t2"], alarms["valid"], onset),
        "spe": rates(alarms["spe"], alarms["valid"], onset),
        "either": rates(alarms["t2"] | alarms["spe"], alarms["valid"], onset),
    }
    rbc_files = sorted(run_dir.glob("rbc_*.json"))
    if not rbc_files:
        raise DataError(f"{run_dir}: no rbc_*.json diagnosis output found")
    n = int(alarms["valid"].size)

    # fault phases: from ground truth when available, else the single onset
    bounds = [onset]
    truth_path = run_dir / "truth.json"
    if truth_path.is_file():
        truth = json.loads(truth_path.read_text(encoding="utf-8"))
        bounds = sorted({int(f["onset"]) for f in truth.get("faults", [])}) or [onset]
    edges = bounds + [n + 1]
    phases = [{"name": "pre_onset", "start": 1, "end": bounds[0] - 1}]
    for i, (a, b) in enumerate(zip(edges[:-1], edges[1:]), start=1):
        phases.append({"name": f"phase_{i}", "start": a, "end": b - 1})

    diagnosis = {}
    for f in rbc_files:
        m = _read_rbc_json(f)
        diagnosis[m.kind] = [
            ph | {"top_sensors": m.top_sensors(slice(ph["start"] - 1, ph["end"]), k=5)}
            for ph in phases
            if ph["end"] >= ph["start"]
        ]
    head = recomputed[summary.get("statistic", "spe")]
    return {
        "statistic": summary.get("statistic", "spe"),
        "far": head["far"],
        "fdr": head["fdr"],
        "delay": head["delay"],
        "onset": onset,
        "per_statistic": recomputed,
        "consistent_with_summary": all(
            abs(head[k] - summary[k2]) < 1e-12 for k, k2 in (("far", "far"), ("fdr", "fdr"), ("delay", "delay"))
        ),
        "diagnosis": diagnosis,
    }


def report_markdown(rep: dict) -> str:
    lines = [
        "# Monitoring report",
        "",
        f"Headline statistic: {rep['statistic']} (onset sample {rep['onset']})",
        "",
        "| rule | FAR | FDR | delay |",
        "|---|---|---|---|",
    ]
    for rule, r in rep["per_statistic"].items():
        lines.append(f"| {rule} | {r['far']:.4f} | {r['fdr']:.4f} | {r['delay']} |")
    for kind, phases in rep["diagnosis"].items():
        lines += ["", f"## Top RBC sensors ({kind})", ""]
        for ph in phases:
            tops = ", ".join(f"{t['tag']} ({t['mean_rbc']:.3g})" for t in ph["top_sensors"])
            lines.append(f"- {ph['name']} (samples {ph['start']}-{ph['end']}): {tops}")
    return "\n".join(lines) + "\n"
