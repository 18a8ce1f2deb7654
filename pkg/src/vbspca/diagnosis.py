"""Reconstruction-based contributions (RBC) for T^2 and SPE indices.

For a quadratic index ``Index(y) = y' Phi y`` and a sensor direction ``e_k``,
reconstructing ``y`` along ``e_k`` removes ``RBC_k = (e_k' Phi y)^2 / Phi_kk``
from the index. The sensor whose reconstruction removes the most is the
likeliest culprit.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .core_data import DataError, DataMatrix, atomic_write_text, csv_text, format_float

KINDS = ("T2", "SPE")
DIAG_EPS = 1e-12


class UndiagnosableError(ValueError):
    """The requested direction lies in the null space of the index matrix."""


@dataclass(frozen=True)
class IndexMatrix:
    phi_mat: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        phi = np.asarray(self.phi_mat, dtype=float)
        if phi.ndim != 2 or phi.shape[0] != phi.shape[1]:
            raise ValueError("index matrix must be square")
        if not np.allclose(phi, phi.T, rtol=0, atol=1e-10):
            raise ValueError("index matrix is not symmetric")
        scale = max(1.0, float(np.abs(phi).max()))
        if np.linalg.eigvalsh(phi).min() < -1e-10 * scale:
            raise ValueError("index matrix is not positive semidefinite")
        object.__setattr__(self, "phi_mat", phi)

    @property
    def m(self) -> int:
        return self.phi_mat.shape[0]


def build_index_matrix(loading, lambda_diag, kind: str) -> IndexMatrix:
    P = np.asarray(loading, dtype=float)
    if kind == "T2":
        lam = np.asarray(lambda_diag, dtype=float)
        if lam.shape != (P.shape[1],):
            raise ValueError(f"lambda_diag has {lam.size} entries, loading has {P.shape[1]} columns")
        phi = (P * lam) @ P.T
    elif kind == "SPE":
        phi = np.eye(P.shape[0]) - P @ P.T
    else:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    return IndexMatrix(0.5 * (phi + phi.T), kind)


def index_value(y, Phi: IndexMatrix) -> float:
    y = _vector(y, Phi)
    return float(y @ Phi.phi_mat @ y)


def _vector(y, Phi: IndexMatrix) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.shape != (Phi.m,):
        raise ValueError(f"expected a vector of {Phi.m} sensors, got shape {y.shape}")
    return y


def fault_magnitude(y, Phi: IndexMatrix, phi_k) -> float:
    """Magnitude f minimizing Index(y - f phi_k)."""
    y = _vector(y, Phi)
    d = _vector(phi_k, Phi)
    Pd = Phi.phi_mat @ d
    denom = float(d @ Pd)
    if not denom > DIAG_EPS:
        raise UndiagnosableError("direction lies in the null space of the index matrix")
    return float(Pd @ y) / denom


def reconstruct(y, Phi: IndexMatrix, phi_k) -> np.ndarray:
    """psi_k = y - f_k phi_k."""
    f = fault_magnitude(y, Phi, phi_k)
    return np.asarray(y, dtype=float) - f * np.asarray(phi_k, dtype=float)


def rbc_vector(y, Phi: IndexMatrix) -> np.ndarray:
    """RBC for every sensor of one sample; NaN where the sensor is undiagnosable."""
    y = _vector(y, Phi)
    g = Phi.phi_mat @ y
    diag = np.diag(Phi.phi_mat)
    ok = diag > DIAG_EPS
    out = np.full(Phi.m, np.nan)
    out[ok] = g[ok] ** 2 / diag[ok]
    return out


def rbc(y, Phi: IndexMatrix, k: int) -> float:
    """RBC of sensor ``k`` (0-based)."""
    if not 0 <= k < Phi.m:
        raise IndexError(f"sensor index {k} outside 0..{Phi.m - 1}")
    if not Phi.phi_mat[k, k] > DIAG_EPS:
        raise UndiagnosableError(f"sensor {k} is undiagnosable for {Phi.kind}")
    return float(rbc_vector(y, Phi)[k])


@dataclass(frozen=True)
class RbcMap:
    values: np.ndarray  # n_samples x m, NaN = undiagnosable
    kind: str
    tags: tuple

    def argmax(self) -> np.ndarray:
        """0-based top sensor per sample (-1 when every sensor is undiagnosable)."""
        v = np.where(np.isnan(self.values), -np.inf, self.values)
        idx = np.argmax(v, axis=1)
        idx[np.all(np.isnan(self.values), axis=1)] = -1
        return idx

    def top_sensors(self, rows=None, k: int = 5) -> list:
        """Sensors ranked by mean RBC over ``rows`` (a slice or index array)."""
        block = self.values if rows is None else self.values[rows]
        if block.shape[0] == 0:
            return []
        with np.errstate(invalid="ignore"):
            mean = np.nanmean(block, axis=0) if not np.all(np.isnan(block)) else block[0]
        order = sorted(
            (j for j in range(len(self.tags)) if np.isfinite(mean[j])),
            key=lambda j: (-mean[j], j),
        )
        return [{"tag": self.tags[j], "sensor": j + 1, "mean_rbc": float(mean[j])} for j in order[:k]]

    def csv(self) -> str:
        rows = []
        for i, row in enumerate(self.values, start=1):
            for tag, v in zip(self.tags, row):
                rows.append([i, tag, self.kind, "" if math.isnan(v) else format_float(v)])
        return csv_text(["sample", "tag", "kind", "rbc"], rows)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "tags": list(self.tags),
            "samples": list(range(1, self.values.shape[0] + 1)),
            "values": [[None if math.isnan(v) else float(v) for v in row] for row in self.values],
        }

    def write(self, csv_path, json_path) -> None:
        atomic_write_text(csv_path, self.csv())
        atomic_write_text(json_path, json.dumps(self.to_dict(), sort_keys=True) + "\n")


def rbc_map(Y_test, loading, lambda_diag, kind: str) -> RbcMap:
    if isinstance(Y_test, DataMatrix):
        Y, tags = Y_test.values, Y_test.tags
    else:
        Y = np.asarray(Y_test, dtype=float)
        tags = tuple(str(j + 1) for j in range(Y.shape[0]))
    Phi = build_index_matrix(loading, lambda_diag, kind)
    if Y.shape[0] != Phi.m:
        raise DataError(f"data has {Y.shape[0]} sensors, model expects {Phi.m}")
    values = np.array([rbc_vector(y, Phi) for y in Y.T]).reshape(Y.shape[1], Phi.m)
    return RbcMap(values, kind, tuple(tags))
