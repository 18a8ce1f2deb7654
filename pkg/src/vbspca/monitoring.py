"""T^2 / SPE fault detection with kernel-density control limits."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .core_data import DataError, DataMatrix, atomic_write_text, csv_text, format_float
from .sparse_var import VarModel, build_lagged

MIN_KDE_SAMPLES = 30
CONSECUTIVE = 3
RULES = ("spe", "t2", "either")


@dataclass(frozen=True)
class Kde:
    """Gaussian-kernel density estimate of a scalar statistic."""

    samples: np.ndarray
    h: float

    @classmethod
    def fit(cls, values) -> "Kde":
        e = np.sort(np.asarray(values, dtype=float).ravel())
        if e.size < 2 or not np.all(np.isfinite(e)):
            raise DataError("KDE needs at least two finite samples")
        h = 1.06 * e.std(ddof=1) * e.size ** (-0.2)
        # Identical samples give h = 0; keep a tiny kernel so the CDF stays defined.
        floor = 1e-9 * max(1.0, float(np.abs(e).max()))
        return cls(e, max(h, floor))

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        u = (x[..., None] - self.samples) / self.h
        return np.exp(-0.5 * u * u).sum(axis=-1) / (self.samples.size * self.h * math.sqrt(2 * math.pi))

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return ndtr((x[..., None] - self.samples) / self.h).mean(axis=-1)

    def quantile(self, alpha: float, rtol: float = 1e-12) -> float:
        """Smallest v with cdf(v) >= alpha, by bisection."""
        if not 0.0 < alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        lo = self.samples[0] - 10.0 * self.h
        hi = self.samples[-1] + 10.0 * self.h
        scale = max(hi - lo, 1e-300)
        while hi - lo > rtol * scale:
            mid = 0.5 * (lo + hi)
            if self.cdf(mid) >= alpha:
                hi = mid
            else:
                lo = mid
            if mid in (lo, hi) and hi - lo <= np.spacing(hi):
                break
        return float(hi)


@dataclass(frozen=True)
class MonitorProfile:
    lambda_diag: np.ndarray
    t2_limit: float
    spe_limit: float
    alpha: float = 0.95
    bandwidth_t2: float = 1.0
    bandwidth_spe: float = 1.0

    SCHEMA = "monitor-profile/1"

    def __post_init__(self):
        lam = np.asarray(self.lambda_diag, dtype=float)
        if np.any(lam <= 0) or not np.all(np.isfinite(lam)):
            raise ValueError("lambda_diag entries must be positive and finite")
        if not (self.t2_limit > 0 and self.spe_limit > 0):
            raise ValueError("control limits must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        object.__setattr__(self, "lambda_diag", lam)

    def to_dict(self) -> dict:
        return {
            "schema": self.SCHEMA,
            "lambda_diag": self.lambda_diag.tolist(),
            "t2_limit": float(self.t2_limit),
            "spe_limit": float(self.spe_limit),
            "alpha": float(self.alpha),
            "bandwidth_t2": float(self.bandwidth_t2),
            "bandwidth_spe": float(self.bandwidth_spe),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MonitorProfile":
        if d.get("schema") != cls.SCHEMA:
            raise DataError(f"expected schema {cls.SCHEMA!r}, got {d.get('schema')!r}")
        return cls(
            np.array(d["lambda_diag"], float),
            float(d["t2_limit"]),
            float(d["spe_limit"]),
            float(d["alpha"]),
            float(d["bandwidth_t2"]),
            float(d["bandwidth_spe"]),
        )


def t2_statistic(t_hat, profile_or_lambda) -> float:
    lam = getattr(profile_or_lambda, "lambda_diag", profile_or_lambda)
    t = np.asarray(t_hat, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if t.shape != lam.shape:
        raise ValueError(f"score length {t.shape} does not match Lambda {lam.shape}")
    return float(np.sum(lam * t * t))


def spe_statistic(y, loading) -> float:
    y = np.asarray(y, dtype=float)
    P = np.asarray(loading, dtype=float)
    if y.shape != (P.shape[0],):
        raise ValueError(f"expected {P.shape[0]} sensors, got {y.shape}")
    e = y - P @ (P.T @ y)
    return float(e @ e)


def _values(X):
    return X.values if isinstance(X, DataMatrix) else np.asarray(X, dtype=float)


def series_statistics(loading, var: VarModel, Y, lambda_diag=None):
    """Statistics for samples tau+1..n (1-based): (t_hat, t2 or None, spe)."""
    P = np.asarray(loading, dtype=float)
    Y = _values(Y)
    if Y.shape[0] != P.shape[0]:
        raise DataError(f"data has {Y.shape[0]} sensors, model expects {P.shape[0]}")
    if P.shape[1] != var.r:
        raise ValueError("loading rank does not match the VAR dimension")
    T = P.T @ Y
    d = build_lagged(T, var.tau)
    t_hat = var.intercept + d.Q @ var.omega  # (n - tau) x r
    E = Y[:, var.tau :] - P @ T[:, var.tau :]
    spe = np.sum(E * E, axis=0)
    t2 = None if lambda_diag is None else (t_hat * t_hat) @ np.asarray(lambda_diag, float)
    return t_hat, t2, spe


def calibrate(loading, var: VarModel, X_train, alpha: float = 0.95) -> MonitorProfile:
    Y = _values(X_train)
    L = Y.shape[1]
    if L <= var.tau + MIN_KDE_SAMPLES:
        raise DataError(f"need more than {var.tau + MIN_KDE_SAMPLES} training samples, got {L}")
    t_hat, _, spe = series_statistics(loading, var, Y)
    v = t_hat.var(axis=0, ddof=1)
    if np.any(v <= 1e-300):
        bad = [j + 1 for j in np.flatnonzero(v <= 1e-300)]
        raise DataError(f"predicted latent component(s) {bad} have zero variance")
    lam = 1.0 / v
    t2 = (t_hat * t_hat) @ lam
    k_t2, k_spe = Kde.fit(t2), Kde.fit(spe)
    return MonitorProfile(
        lambda_diag=lam,
        t2_limit=k_t2.quantile(alpha),
        spe_limit=k_spe.quantile(alpha),
        alpha=alpha,
        bandwidth_t2=k_t2.h,
        bandwidth_spe=k_spe.h,
    )


def first_run(alarms, start: int, run: int = CONSECUTIVE) -> int:
    """First 0-based index >= start opening ``run`` consecutive alarms, or -1."""
    count = 0
    for i in range(start, len(alarms)):
        count = count + 1 if alarms[i] else 0
        if count == run:
            return i - run + 1
    return -1


def rates(alarms, valid, onset: int) -> dict:
    """far / fdr / delay for one alarm vector. ``onset`` is 1-based."""
    idx = np.arange(1, len(alarms) + 1)
    pre = valid & (idx < onset)
    post = valid & (idx >= onset)
    far = float(alarms[pre].mean()) if pre.any() else 0.0
    fdr = float(alarms[post].mean()) if post.any() else 0.0
    k = first_run(alarms, onset - 1)
    return {"far": far, "fdr": fdr, "delay": -1 if k < 0 else k - (onset - 1)}


@dataclass(frozen=True)
class DetectionResult:
    t2_series: np.ndarray  # NaN during warm-up
    spe_series: np.ndarray
    t2_alarms: np.ndarray
    spe_alarms: np.ndarray
    far: float
    fdr: float
    detection_delay: int
    onset: int
    tau: int
    t2_limit: float
    spe_limit: float
    statistic: str = "spe"
    per_statistic: dict = field(default_factory=dict)

    @property
    def alarms(self) -> np.ndarray:
        if self.statistic == "t2":
            return self.t2_alarms
        if self.statistic == "spe":
            return self.spe_alarms
        return self.t2_alarms | self.spe_alarms

    def summary(self) -> dict:
        return {
            "far": self.far,
            "fdr": self.fdr,
            "delay": self.detection_delay,
            "statistic": self.statistic,
            "onset": self.onset,
            "n_samples": int(self.t2_series.size),
            "warmup": self.tau,
            "t2_limit": self.t2_limit,
            "spe_limit": self.spe_limit,
            "per_statistic": self.per_statistic,
        }

    def csv(self) -> str:
        header = ["sample_index", "t2", "spe", "t2_limit", "spe_limit", "t2_alarm", "spe_alarm", "phase"]
        rows = []
        for i in range(self.t2_series.size):
            k = i + 1
            if k <= self.tau:
                rows.append([k, "", "", format_float(self.t2_limit), format_float(self.spe_limit), "", "", "warmup"])
                continue
            rows.append([
                k,
                format_float(self.t2_series[i]),
                format_float(self.spe_series[i]),
                format_float(self.t2_limit),
                format_float(self.spe_limit),
                int(self.t2_alarms[i]),
                int(self.spe_alarms[i]),
                "pre_onset" if k < self.onset else "post_onset",
            ])
        return csv_text(header, rows)

    def write(self, csv_path, json_path) -> None:
        atomic_write_text(csv_path, self.csv())
        atomic_write_text(json_path, json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def detect(profile: MonitorProfile, loading, var: VarModel, Y_test, onset: int = 201,
           statistic: str = "spe") -> DetectionResult:
    """Evaluate a test window. ``statistic`` picks the headline alarm rule:
    "spe", "t2", or "either" (alarm when any statistic exceeds its limit).
    Metrics for all three are kept in ``per_statistic``."""
    if statistic not in RULES:
        raise ValueError(f"statistic must be one of {RULES}")
    Y = _values(Y_test)
    n = Y.shape[1]
    if not 1 <= onset <= n:
        raise ValueError(f"onset {onset} outside 1..{n}")
    if n <= var.tau:
        raise DataError(f"test set needs more than tau={var.tau} samples")
    _, t2, spe = series_statistics(loading, var, Y, profile.lambda_diag)
    pad = np.full(var.tau, np.nan)
    t2 = np.concatenate([pad, t2])
    spe = np.concatenate([pad, spe])
    valid = np.isfinite(t2)
    a_t2 = valid & (np.nan_to_num(t2) > profile.t2_limit)
    a_spe = valid & (np.nan_to_num(spe) > profile.spe_limit)
    per = {
        "t2": rates(a_t2, valid, onset),
        "spe": rates(a_spe, valid, onset),
        "either": rates(a_t2 | a_spe, valid, onset),
    }
    head = per[statistic]
    return DetectionResult(
        t2_series=t2,
        spe_series=spe,
        t2_alarms=a_t2,
        spe_alarms=a_spe,
        far=head["far"],
        fdr=head["fdr"],
        detection_delay=head["delay"],
        onset=onset,
        tau=var.tau,
        t2_limit=profile.t2_limit,
        spe_limit=profile.spe_limit,
        statistic=statistic,
        per_statistic=per,
    )
