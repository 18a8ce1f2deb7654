"""l1-regularized vector autoregression on latent score series.

Series are held components x time (``T[:, k]`` is the score vector at step
``k``). The coefficient matrix stacks one r x r block per lag, lag 1 first,
so that ``t_hat_k = intercept + Q_k @ omega`` with
``Q_k = [t_{k-1}, ..., t_{k-tau}]``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core_data import DataError

log = logging.getLogger(__name__)

CD_TOL = 1e-8
CD_MAX_CYCLES = 10_000


@dataclass(frozen=True)
class LaggedDesign:
    Z: np.ndarray  # (L - tau) x r targets
    Q: np.ndarray  # (L - tau) x (r * tau) regressors
    tau: int


@dataclass(frozen=True)
class VarModel:
    omega: np.ndarray  # (r * tau) x r
    tau: int
    lam: float
    r: int
    intercept: np.ndarray = field(default=None)

    SCHEMA = "sparse-var/1"

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=float)
        if omega.shape != (self.r * self.tau, self.r):
            raise ValueError(f"omega shape {omega.shape} != {(self.r * self.tau, self.r)}")
        if not np.all(np.isfinite(omega)):
            raise ValueError("omega has non-finite entries")
        icpt = np.zeros(self.r) if self.intercept is None else np.asarray(self.intercept, float)
        if icpt.shape != (self.r,):
            raise ValueError(f"intercept must have length {self.r}")
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "intercept", icpt)

    def block(self, d: int) -> np.ndarray:
        """Coefficient block for lag ``d`` (1-based)."""
        return self.omega[(d - 1) * self.r : d * self.r]

    def to_dict(self) -> dict:
        return {
            "schema": self.SCHEMA,
            "tau": self.tau,
            "r": self.r,
            "lambda": float(self.lam),
            "omega": self.omega.tolist(),
            "intercept": self.intercept.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VarModel":
        if d.get("schema") != cls.SCHEMA:
            raise DataError(f"expected schema {cls.SCHEMA!r}, got {d.get('schema')!r}")
        r, tau = int(d["r"]), int(d["tau"])
        omega = np.array(d["omega"], float).reshape(r * tau, r)
        return cls(omega, tau, float(d["lambda"]), r, np.array(d["intercept"], float))


def build_lagged(T_series, tau: int) -> LaggedDesign:
    T = np.asarray(T_series, dtype=float)
    if T.ndim != 2:
        raise ValueError("score series must be a 2-D (r x L) array")
    r, L = T.shape
    if tau < 1:
        raise ValueError("tau must be >= 1")
    if L <= tau:
        raise ValueError(f"need more than tau={tau} samples, got {L}")
    Z = T[:, tau:].T.copy()
    Q = np.hstack([T[:, tau - d : L - d].T for d in range(1, tau + 1)])
    return LaggedDesign(Z, Q, tau)


def lasso_objective(Q, z, w, lam) -> float:
    resid = z - Q @ w
    return 0.5 * float(resid @ resid) + lam * float(np.abs(w).sum())


def soft_threshold(x, lam):
    return np.sign(x) * max(abs(x) - lam, 0.0)


def coordinate_descent(Q, z, lam, w0=None, tol=CD_TOL, max_cycles=CD_MAX_CYCLES, trace=None):
    """Cyclic coordinate descent for 0.5||z - Q w||^2 + lam ||w||_1.

    Works on the Gram matrix, so each coordinate step is O(p). Returns
    ``(w, n_cycles, converged)``. If ``trace`` is a list, the objective after
    every cycle is appended to it.
    """
    Q = np.asarray(Q, dtype=float)
    z = np.asarray(z, dtype=float)
    if not (np.all(np.isfinite(Q)) and np.all(np.isfinite(z))):
        raise ValueError("non-finite entries in the lasso design")
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    p = Q.shape[1]
    G = Q.T @ Q
    c = Q.T @ z
    w = np.zeros(p) if w0 is None else np.array(w0, dtype=float)
    # running G @ w, kept in sync with every coordinate move
    Gw = G @ w
    for cycle in range(1, max_cycles + 1):
        biggest = 0.0
        for j in range(p):
            gjj = G[j, j]
            old = w[j]
            if gjj <= 0.0:
                new = 0.0
            else:
                rho = c[j] - Gw[j] + gjj * old
                new = soft_threshold(rho, lam) / gjj
            if new != old:
                Gw += G[:, j] * (new - old)
                w[j] = new
                biggest = max(biggest, abs(new - old))
        if trace is not None:
            trace.append(lasso_objective(Q, z, w, lam))
        if biggest < tol:
            return w, cycle, True
    return w, max_cycles, False


def kkt_residual(Q, z, w, lam) -> float:
    """Largest violation of the lasso optimality conditions at ``w``."""
    g = Q.T @ (z - Q @ w)
    active = w != 0
    viol = np.zeros_like(g)
    viol[active] = np.abs(g[active] - lam * np.sign(w[active]))
    viol[~active] = np.maximum(np.abs(g[~active]) - lam, 0.0)
    return float(viol.max()) if viol.size else 0.0


def lambda_max(d: LaggedDesign) -> float:
    """Smallest lambda giving the all-zero solution on the centered design."""
    Qc = d.Q - d.Q.mean(axis=0)
    Zc = d.Z - d.Z.mean(axis=0)
    # column by column, so the value matches the solver's Q'z bit for bit
    return float(max(np.abs(Qc.T @ Zc[:, col]).max() for col in range(Zc.shape[1])))


def lasso_fit(d: LaggedDesign, lam: float, center: bool = True, w0=None) -> VarModel:
    """Column-by-column lasso. With ``center`` the intercept is fit unpenalized."""
    Q, Z = d.Q, d.Z
    if Q.shape[0] < 1:
        raise ValueError("design has no rows")
    r = Z.shape[1]
    if center:
        q_mean, z_mean = Q.mean(axis=0), Z.mean(axis=0)
        Q, Z = Q - q_mean, Z - z_mean
    omega = np.zeros((Q.shape[1], r))
    for col in range(r):
        start = None if w0 is None else w0[:, col]
        w, cycles, ok = coordinate_descent(Q, Z[:, col], lam, w0=start)
        if not ok:
            log.warning("lasso column %d hit the %d-cycle limit", col, cycles)
        omega[:, col] = w
    intercept = z_mean - q_mean @ omega if center else np.zeros(r)
    return VarModel(omega, d.tau, float(lam), r, intercept)


def lambda_grid(d: LaggedDesign, n_grid: int = 20, lo: float = 1e-4, hi: float = 1.0):
    scale = lambda_max(d)
    return np.geomspace(lo, hi, n_grid) * scale


def select_lambda(d: LaggedDesign, n_folds: int = 5, grid=None) -> tuple[float, np.ndarray, np.ndarray]:
    """Blocked (chronological) K-fold CV.

    Returns the chosen lambda, the grid (ascending) and the mean held-out
    squared error at each grid point.
    """
    if grid is None:
        grid = lambda_grid(d)
    grid = np.sort(np.asarray(grid, dtype=float))[::-1]
    N = d.Z.shape[0]
    if N < n_folds * 2:
        raise ValueError(f"need at least {2 * n_folds} lagged rows for {n_folds}-fold CV")
    edges = np.linspace(0, N, n_folds + 1).astype(int)
    errors = np.zeros(len(grid))
    for a, b in zip(edges[:-1], edges[1:]):
        keep = np.r_[0:a, b:N]
        train = LaggedDesign(d.Z[keep], d.Q[keep], d.tau)
        w = None
        for g, lam in enumerate(grid):
            # warm start down the path, largest lambda first
            model = lasso_fit(train, lam, w0=w)
            w = model.omega
            pred = model.intercept + d.Q[a:b] @ model.omega
            errors[g] += np.mean((d.Z[a:b] - pred) ** 2) / n_folds
    grid, errors = grid[::-1], errors[::-1]
    # ties go to the larger lambda (sparser model)
    best = len(errors) - 1 - int(np.argmin(errors[::-1]))
    return float(grid[best]), grid, errors


def suggest_order(T_series, max_tau: int = 6) -> int:
    """Lag order minimizing AIC of an ordinary least-squares VAR on a common sample."""
    T = np.asarray(T_series, dtype=float)
    r, L = T.shape
    if L <= max_tau + r * max_tau + 1:
        raise ValueError("series too short for the requested maximum order")
    best_tau, best_aic = 1, np.inf
    for tau in range(1, max_tau + 1):
        d = build_lagged(T[:, max_tau - tau :], tau)
        X = np.hstack([np.ones((d.Q.shape[0], 1)), d.Q])
        coef, *_ = np.linalg.lstsq(X, d.Z, rcond=None)
        resid = d.Z - X @ coef
        N = resid.shape[0]
        sign, logdet = np.linalg.slogdet(resid.T @ resid / N)
        if sign <= 0:
            continue
        aic = logdet + 2.0 * (r * r * tau + r) / N
        if aic < best_aic:
            best_tau, best_aic = tau, aic
    return best_tau


def var_predict(model: VarModel, history) -> np.ndarray:
    """One-step prediction from ``history`` (r x tau, most recent column first)."""
    H = np.asarray(history, dtype=float)
    if H.shape != (model.r, model.tau):
        raise ValueError(f"history must be {model.r} x {model.tau}, got {H.shape}")
    return model.intercept + H.T.reshape(-1) @ model.omega


def predict_series(model: VarModel, T_series) -> np.ndarray:
    """Predictions for steps tau..L-1 of a score series, as an r x (L - tau) array."""
    d = build_lagged(T_series, model.tau)
    return (model.intercept + d.Q @ model.omega).T


def residual_acf(T_series, model: VarModel, max_lag: int) -> np.ndarray:
    T = np.asarray(T_series, dtype=float)
    L = T.shape[1]
    if max_lag < 1:
        raise ValueError("max_lag must be >= 1")
    if L - model.tau <= max_lag:
        raise ValueError(f"need more than {max_lag} residuals, have {L - model.tau}")
    resid = T[:, model.tau :] - predict_series(model, T)
    return acf(resid, max_lag)


def acf(E, max_lag: int) -> np.ndarray:
    """Row-wise sample autocorrelation at lags 1..max_lag (0 for constant rows)."""
    E = np.atleast_2d(np.asarray(E, dtype=float))
    E = E - E.mean(axis=1, keepdims=True)
    denom = np.sum(E * E, axis=1)
    out = np.zeros((E.shape[0], max_lag))
    for h in range(1, max_lag + 1):
        num = np.sum(E[:, h:] * E[:, :-h], axis=1)
        out[:, h - 1] = np.divide(num, denom, out=np.zeros_like(num), where=denom > 1e-300)
    return out
