"""Synthetic alkaline-water-electrolyzer process data.

A low-rank, autocorrelated stand-in for plant data: ``r_true`` latent series
follow a stable VAR, 32 sensors read a sparse linear mix of them plus an
offset and white noise, and faults are injected on top.

Randomness: every draw comes from numpy's PCG64 seeded through
``SeedSequence([seed, stream])``. Stream 0 builds the process structure
(loadings, dynamics, offsets); other streams generate trajectories, so a
training set and a test set from one config share the same plant.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.linalg import solve_discrete_lyapunov

from .core_data import DataError, DataMatrix

CV_NAMES = (
    "Hydrogen mass flow",
    "Oxygen mass flow",
    "Hydrogen gas-liquid separator liquid level",
    "Oxygen gas-liquid separator liquid level",
    "Water tank return flow",
    "KOH tank outlet flow",
    "Electrolytic cell electrode current",
    "Electrolyzer total voltage",
    "Electrolyte concentration",
    "Electrolyzer inlet flow",
)
PV_NAMES = (
    "Electrolyzer cell temperature",
    "Electrolyzer temperature",
    "Electrolyte level",
    "Electrolyzer pressure",
    "Hydrogen purity",
    "Oxygen purity",
    "Hydrogen separator pressure",
    "Oxygen separator pressure",
    "Hydrogen condenser temperature",
    "Oxygen condenser temperature",
    "Oxygen electrolyte condenser temperature",
    "Hydrogen electrolyte condenser temperature",
    "Return water condenser temperature",
    "KOH tank level",
    "Water tank level",
    "Gas dryer humidity",
    "Gas dryer pressure",
    "Return pipeline pressure",
    "Hydrogen separator electrolyte concentration",
    "Oxygen separator electrolyte concentration",
    "Hydrogen purifier pressure",
    "Hydrogen purifier purity",
)
TRAIN_STREAM = 1
TEST_STREAM = 2
BURN_IN = 500
FAULT_KINDS = ("bias", "drift", "variance_burst", "level_swing")


def sensor_tags(m: int = 32) -> tuple:
    tags = [f"CV({i})" for i in range(1, 11)] + [f"PV({i})" for i in range(1, 23)]
    if m <= len(tags):
        return tuple(tags[:m])
    return tuple(tags + [f"X({i})" for i in range(len(tags) + 1, m + 1)])


def sensor_descriptions(m: int = 32) -> dict:
    names = CV_NAMES + PV_NAMES
    return {t: names[i] for i, t in enumerate(sensor_tags(m)) if i < len(names)}


def rng_for(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(stream)])))


@dataclass(frozen=True)
class ProcessConfig:
    m: int = 32
    r_true: int = 5
    var_order: int = 2
    spectral_radius: float = 0.85
    noise_sigma: float = 0.1
    loading_sparsity: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.m < 1 or self.r_true < 1 or self.var_order < 1:
            raise DataError("m, r_true and var_order must be >= 1")
        if self.r_true > self.m:
            raise DataError("r_true cannot exceed m")
        if not 0.0 < self.spectral_radius < 1.0:
            raise DataError("spectral_radius must lie in (0, 1)")
        if not 0.0 < self.loading_sparsity < 1.0:
            raise DataError("loading_sparsity must lie in (0, 1)")
        if not self.noise_sigma >= 0:
            raise DataError("noise_sigma must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "ProcessConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown process config keys: {sorted(unknown)}")
        return cls(**d)


def companion(blocks) -> np.ndarray:
    """Companion matrix of t_k = sum_d A_d t_{k-d}."""
    p = len(blocks)
    r = blocks[0].shape[0]
    C = np.zeros((r * p, r * p))
    C[:r] = np.hstack(blocks)
    C[r:, :-r] = np.eye(r * (p - 1))
    return C


def spectral_radius(blocks) -> float:
    return float(np.abs(np.linalg.eigvals(companion(blocks))).max())


@dataclass(frozen=True)
class Process:
    cfg: ProcessConfig
    loading: np.ndarray  # m x r_true
    blocks: tuple  # var_order matrices, lag 1 first
    offset: np.ndarray  # m
    innov_scale: np.ndarray  # r_true, innovation std per latent

    @property
    def tags(self) -> tuple:
        return sensor_tags(self.cfg.m)


def build_process(cfg: ProcessConfig) -> Process:
    rng = rng_for(cfg.seed, 0)
    m, r, p = cfg.m, cfg.r_true, cfg.var_order
    A = rng.standard_normal((m, r))
    mask = rng.random((m, r)) >= cfg.loading_sparsity
    # every sensor reads at least one latent, every latent reaches at least one sensor
    mask[np.arange(m), rng.integers(0, r, m)] = True
    mask[rng.integers(0, m, r), np.arange(r)] = True
    A = A * mask

    # slow, persistent latents: positive own-lag-1 memory, weak cross-coupling
    blocks = [0.2 * rng.standard_normal((r, r)) / np.sqrt(r * p) for _ in range(p)]
    blocks[0] = blocks[0] + np.diag(rng.uniform(0.5, 1.0, r))
    for _ in range(10):
        rho = spectral_radius(blocks)
        if rho < 1.0 and abs(rho - cfg.spectral_radius) < 1e-9:
            break
        c = cfg.spectral_radius / rho
        # scaling lag d by c^d scales every companion eigenvalue by c
        blocks = [B * c ** (d + 1) for d, B in enumerate(blocks)]
    rho = spectral_radius(blocks)
    if not rho < 1.0:
        raise DataError(f"could not stabilize latent dynamics (spectral radius {rho:.4f})")

    # unit stationary variance per latent (diagonal similarity keeps the spectrum)
    C = companion(blocks)
    Qn = np.zeros_like(C)
    Qn[:r, :r] = np.eye(r)
    S = solve_discrete_lyapunov(C, Qn)[:r, :r]
    s = np.sqrt(np.diag(S))
    blocks = [B / s[:, None] * s[None, :] for B in blocks]
    # equal signal variance on every sensor, so standardizing keeps the noise isotropic
    R = (S / np.outer(s, s))
    A = A / np.sqrt(np.einsum("jk,kl,jl->j", A, R, A))[:, None]
    offset = rng.normal(0.0, 1.0, m)
    return Process(cfg, A, tuple(blocks), offset, 1.0 / s)


def simulate_latent(proc: Process, n: int, rng) -> np.ndarray:
    r, p = proc.cfg.r_true, proc.cfg.var_order
    total = BURN_IN + n
    T = np.zeros((r, total + p))
    innov = rng.standard_normal((r, total)) * proc.innov_scale[:, None]
    for k in range(p, total + p):
        acc = innov[:, k - p].copy()
        for d, B in enumerate(proc.blocks, start=1):
            acc += B @ T[:, k - d]
        T[:, k] = acc
    return T[:, p + BURN_IN :]


def simulate_normal(cfg: ProcessConfig, n: int, stream: int = TRAIN_STREAM, return_latent=False):
    if n < 100:
        raise DataError(f"need n >= 100 samples, got {n}")
    proc = build_process(cfg)
    rng = rng_for(cfg.seed, stream)
    T = simulate_latent(proc, n, rng)
    noise = rng.standard_normal((cfg.m, n)) * cfg.noise_sigma
    X = proc.loading @ T + proc.offset[:, None] + noise
    out = DataMatrix(X, proc.tags)
    return (out, T) if return_latent else out


@dataclass(frozen=True)
class FaultSpec:
    kind: str
    sensors: tuple  # 1-based
    onset: int = 201
    magnitude: float = 6.0
    duration: Optional[int] = None

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise DataError(f"unknown fault kind {self.kind!r}; expected one of {FAULT_KINDS}")
        object.__setattr__(self, "sensors", tuple(int(s) for s in self.sensors))
        if not self.sensors:
            raise DataError("fault needs at least one sensor")
        if self.onset < 1:
            raise DataError("onset must be >= 1")
        if not np.isfinite(self.magnitude):
            raise DataError("fault magnitude must be finite")
        if self.duration is not None and self.duration < 1:
            raise DataError("duration must be >= 1 when given")

    def to_dict(self) -> dict:
        return asdict(self) | {"sensors": list(self.sensors)}

    @classmethod
    def from_dict(cls, d: dict) -> "FaultSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown fault keys: {sorted(unknown)}")
        return cls(**d)


def fault_shape(spec: FaultSpec, n: int, rng) -> np.ndarray:
    """Unit-magnitude additive pattern for samples onset..n (1-based, inclusive)."""
    k = np.arange(n - spec.onset + 1)
    active = np.ones(k.size, bool) if spec.duration is None else k < spec.duration
    if spec.kind == "bias":
        return active.astype(float)
    if spec.kind == "drift":
        # ramp reaching full size at onset + duration, then held
        span = spec.duration if spec.duration is not None else k.size
        return np.minimum((k + 1) / span, 1.0)
    if spec.kind == "level_swing":
        period = spec.duration if spec.duration is not None else 25
        return np.where((k // period) % 2 == 0, 1.0, -1.0)
    # variance_burst: extra white noise while active
    return rng.standard_normal(k.size) * active


def inject_fault(X: DataMatrix, spec: FaultSpec, seed: int = 0, sigma=None) -> DataMatrix:
    """Add a fault to ``X``. Magnitudes are in units of ``sigma`` (per sensor),
    normally the training-set standard deviations; without it the fault-free
    stretch before onset stands in."""
    n = X.n
    if not spec.onset + 1 <= n:
        raise DataError(f"onset {spec.onset} leaves no faulty samples in {n}")
    for s in spec.sensors:
        if not 1 <= s <= X.m:
            raise DataError(f"sensor index {s} outside 1..{X.m}")
    if spec.magnitude == 0:
        return X
    if sigma is None:
        base = X.values[:, : spec.onset - 1]
        ref = base if base.shape[1] >= 2 else X.values
        sigma = ref.std(axis=1, ddof=1)
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (X.m,):
        raise DataError(f"sigma must have one entry per sensor ({X.m})")
    Y = X.values.copy()
    rng = rng_for(seed, 1000 + FAULT_KINDS.index(spec.kind))
    start = spec.onset - 1
    for s in spec.sensors:
        j = s - 1
        Y[j, start:] += spec.magnitude * sigma[j] * fault_shape(spec, n, rng)
    return X.with_values(Y)


@dataclass(frozen=True)
class Scenario:
    name: str
    process: ProcessConfig
    faults: tuple
    n_train: int = 1000
    n_test: int = 600

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "process": asdict(self.process),
            "n_train": self.n_train,
            "n_test": self.n_test,
            "faults": [f.to_dict() for f in self.faults],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        if not isinstance(d, dict):
            raise DataError("scenario must be a JSON object")
        unknown = set(d) - {"name", "process", "faults", "n_train", "n_test", "preset", "seed"}
        if unknown:
            raise DataError(f"unknown scenario keys: {sorted(unknown)}")
        if "preset" in d:
            return preset(d["preset"], seed=int(d.get("seed", 0)))
        try:
            return cls(
                name=str(d.get("name", "scenario")),
                process=ProcessConfig.from_dict(d.get("process", {}) | ({"seed": d["seed"]} if "seed" in d else {})),
                faults=tuple(FaultSpec.from_dict(f) for f in d.get("faults", [])),
                n_train=int(d.get("n_train", 1000)),
                n_test=int(d.get("n_test", 600)),
            )
        except TypeError as exc:
            raise DataError(f"malformed scenario: {exc}") from None

    @property
    def onset(self) -> int:
        return min((f.onset for f in self.faults), default=self.n_test + 1)

    def ground_truth(self) -> dict:
        tags = sensor_tags(self.process.m)
        sensors = sorted({s for f in self.faults for s in f.sensors})
        return {
            "scenario": self.name,
            "onset": self.onset,
            "faulty_sensors": sensors,
            "faulty_tags": [tags[s - 1] for s in sensors],
            "faults": [f.to_dict() | {"tags": [tags[s - 1] for s in f.sensors]} for f in self.faults],
        }


def generate(sc: Scenario) -> tuple:
    """(training data, faulty test data) for a scenario."""
    train = simulate_normal(sc.process, sc.n_train, TRAIN_STREAM)
    test = simulate_normal(sc.process, sc.n_test, TEST_STREAM)
    sigma = train.values.std(axis=1, ddof=1)
    for i, f in enumerate(sc.faults):
        test = inject_fault(test, f, seed=sc.process.seed * 7919 + i, sigma=sigma)
    return train, test


def preset(name: str, seed: int = 0) -> Scenario:
    cfg = ProcessConfig(seed=seed)
    if name == "fault2-analogue":
        # early stage: unstable reading on sensor 24; later stage: sensors 27 and 28 shift
        faults = (
            FaultSpec("variance_burst", (24,), onset=201, magnitude=3.0, duration=100),
            FaultSpec("bias", (24,), onset=201, magnitude=4.0, duration=100),
            FaultSpec("bias", (27, 28), onset=301, magnitude=5.0),
        )
    elif name == "fault6-analogue":
        # sharp rise and fall of the hydrogen separator level, CV(3)
        faults = (FaultSpec("level_swing", (3,), onset=201, magnitude=5.0, duration=50),)
    else:
        raise DataError(f"unknown preset {name!r}; expected fault2-analogue or fault6-analogue")
    return Scenario(name, cfg, faults)


PRESETS = ("fault2-analogue", "fault6-analogue")


def load_scenario(path) -> Scenario:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return Scenario.from_dict(d)
