"""Variational Bayesian sparse PCA with a hierarchical Laplace prior.

Each loading entry gets a two-level prior: ``P_ji | eta_ji ~ N(0, eta_ji)``
with ``eta_ji ~ Exp(mean=varphi)``. Integrating ``eta`` out gives a Laplace
density on ``P_ji``, while the conditional Gaussian keeps every update in
closed form. Scores have a fixed ``N(0, I)`` prior, so the rank is set by
the caller rather than pruned.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import erfcx

from .core_data import DataError, DataMatrix
from .gaussian import svd_init
from .linalg_utils import NumericalError, orthonormalize_loading, spd_inverse, symmetrize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LaplaceHyper:
    varphi: float = 1.0
    c0: float = 1e-5
    d0: float = 1e-5
    varsigma: float = 1e-3
    r: int = 5
    max_iters: int = 500
    tol: float = 1e-6

    def __post_init__(self):
        for name in ("varphi", "c0", "d0", "varsigma", "tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.r < 1 or self.max_iters < 1:
            raise ValueError("r and max_iters must be >= 1")

    def to_dict(self) -> dict:
        return {
            "varphi": self.varphi,
            "c0": self.c0,
            "d0": self.d0,
            "varsigma": self.varsigma,
            "r": self.r,
            "max_iters": self.max_iters,
            "tol": self.tol,
        }


@dataclass(frozen=True)
class LaplaceState:
    mu_P: np.ndarray  # m x r
    Sigma_P: np.ndarray  # m x r x r, one covariance per loading row
    mu_t: np.ndarray  # r x n
    Sigma_t: np.ndarray  # r x r, shared by all samples
    mu_xbar: np.ndarray  # m
    Sigma_xbar: float
    e_theta: float
    theta_shape: float
    theta_rate: float
    mu_eta: np.ndarray  # m x r

    @property
    def r(self) -> int:
        return self.mu_P.shape[1]


@dataclass(frozen=True)
class LaplaceModel:
    loading: np.ndarray
    latent_scale: np.ndarray
    noise_precision: float
    mean_correction: np.ndarray
    rank: int
    converged: bool = True
    n_iter: int = 0
    change_trace: tuple = field(default=(), repr=False)
    hyper: LaplaceHyper = field(default_factory=LaplaceHyper)

    SCHEMA = "vbspca-laplace/1"

    def to_dict(self) -> dict:
        return {
            "schema": self.SCHEMA,
            "rank": self.rank,
            "loading": self.loading.tolist(),
            "latent_scale": self.latent_scale.tolist(),
            "noise_precision": float(self.noise_precision),
            "mean_correction": self.mean_correction.tolist(),
            "converged": self.converged,
            "n_iter": self.n_iter,
            "change_trace": [float(v) for v in self.change_trace],
            "hyper": self.hyper.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LaplaceModel":
        if d.get("schema") != cls.SCHEMA:
            raise DataError(f"expected schema {cls.SCHEMA!r}, got {d.get('schema')!r}")
        m = len(d["mean_correction"])
        return cls(
            loading=np.array(d["loading"], float).reshape(m, d["rank"]),
            latent_scale=np.array(d["latent_scale"], float),
            noise_precision=float(d["noise_precision"]),
            mean_correction=np.array(d["mean_correction"], float),
            rank=int(d["rank"]),
            converged=bool(d["converged"]),
            n_iter=int(d["n_iter"]),
            change_trace=tuple(d.get("change_trace", ())),
            hyper=LaplaceHyper(**d["hyper"]),
        )


def folded_normal_mean(mu, var):
    """E|x| for x ~ N(mu, var).

    Written as |mu| + 2 s [phi(a) - a Phi(-a)] with a = |mu| / s; the bracket
    is evaluated through erfcx so it stays non-negative in floating point.
    """
    mu = np.abs(np.asarray(mu, dtype=float))
    s = np.sqrt(np.asarray(var, dtype=float))
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(s > 0, mu / np.where(s > 0, s, 1.0), 0.0)
    x = a / np.sqrt(2.0)
    bracket = np.exp(-x * x) * np.maximum(1.0 / np.sqrt(2.0 * np.pi) - 0.5 * a * erfcx(x), 0.0)
    return np.where(s > 0, mu + 2.0 * s * bracket, mu)


def eta_mean(varphi: float, abs_p):
    """Posterior mean of the exponential-mixing variance given E|P_ji|."""
    return 0.5 * (varphi + np.sqrt(2.0 * varphi) * np.asarray(abs_p, dtype=float))


def _values(X) -> np.ndarray:
    return X.values if isinstance(X, DataMatrix) else np.asarray(X, dtype=float)


def init_laplace(X, h: LaplaceHyper, seed: int = 0) -> LaplaceState:
    Y = _values(X)
    m, n = Y.shape
    if h.r > min(m, n):
        raise ValueError(f"r={h.r} exceeds min(m, n)={min(m, n)}")
    var = Y.var()
    if not var > 0:
        raise DataError("degenerate input: data matrix has zero variance")
    xbar = Y.mean(axis=1)
    rng = np.random.default_rng(seed)
    jitter = rng.standard_normal(Y.shape) * (1e-14 * np.sqrt(var))
    mu_P, mu_T = svd_init(Y - xbar[:, None] + jitter, h.r)
    e_theta = 1.0 / var
    shape = h.c0 + 0.5 * n * m
    Sigma_P = np.broadcast_to(np.eye(h.r) * 1e-2, (m, h.r, h.r)).copy()
    return LaplaceState(
        mu_P=mu_P,
        Sigma_P=Sigma_P,
        mu_t=mu_T.T.copy(),
        Sigma_t=np.eye(h.r) * 1e-2,
        mu_xbar=xbar,
        Sigma_xbar=1.0 / (n * e_theta + h.varsigma),
        e_theta=e_theta,
        theta_shape=shape,
        theta_rate=shape / e_theta,
        mu_eta=eta_mean(h.varphi, folded_normal_mean(mu_P, 1e-2)),
    )


def expected_PtP(mu_P, Sigma_P):
    return mu_P.T @ mu_P + Sigma_P.sum(axis=0)


def residual_rate(Y, mu_P, Sigma_P, mu_t, Sigma_t, mu_xbar, Sigma_xbar) -> float:
    """Sum over samples of E||y_i - P t_i - xbar||^2, via the term-wise expansion."""
    m, n = Y.shape
    Ett = mu_t @ mu_t.T + n * Sigma_t
    EPtP = expected_PtP(mu_P, Sigma_P)
    Pt = mu_P @ mu_t
    e_xbar_sq = float(mu_xbar @ mu_xbar) + m * Sigma_xbar
    return float(
        np.sum(Y * Y)
        + n * e_xbar_sq
        + np.sum(EPtP * Ett)
        + 2.0 * float(mu_xbar @ Pt.sum(axis=1))
        - 2.0 * float(np.sum(Y * Pt))
        - 2.0 * float(mu_xbar @ Y.sum(axis=1))
    )


def sweep_laplace(state: LaplaceState, X, h: LaplaceHyper) -> LaplaceState:
    """One pass over P, t, xbar, theta, eta (in that order)."""
    Y = _values(X)
    m, n = Y.shape
    r = state.r
    theta = state.e_theta

    # q(P): independent rows sharing the score second moment.
    Ett = state.mu_t @ state.mu_t.T + n * state.Sigma_t
    Yc = Y - state.mu_xbar[:, None]
    prec = theta * Ett[None, :, :] + np.einsum("jk,kl->jkl", 1.0 / state.mu_eta, np.eye(r))
    try:
        L = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("q(P) row precision not positive definite") from exc
    Linv = np.linalg.inv(L)
    Sigma_P = np.einsum("jki,jkl->jil", Linv, Linv)
    Sigma_P = 0.5 * (Sigma_P + Sigma_P.transpose(0, 2, 1))
    rhs = theta * (Yc @ state.mu_t.T)  # m x r
    mu_P = np.einsum("jkl,jl->jk", Sigma_P, rhs)

    # q(t)
    EPtP = expected_PtP(mu_P, Sigma_P)
    Sigma_t = spd_inverse(theta * EPtP + np.eye(r), "Sigma_t")
    mu_t = theta * Sigma_t @ (mu_P.T @ Yc)

    # q(xbar)
    Sigma_xbar = 1.0 / (n * theta + h.varsigma)
    mu_xbar = theta * Sigma_xbar * (Y - mu_P @ mu_t).sum(axis=1)

    # q(theta)
    shape = h.c0 + 0.5 * n * m
    sq = residual_rate(Y, mu_P, Sigma_P, mu_t, Sigma_t, mu_xbar, Sigma_xbar)
    rate = h.d0 + 0.5 * sq
    if not (np.isfinite(rate) and rate > 0):
        raise NumericalError(f"noise Gamma rate d={rate!r} is not positive")

    # q(eta): mean only, with E|P_ji| from the Gaussian marginal.
    var_P = np.einsum("jii->ji", Sigma_P)
    mu_eta = eta_mean(h.varphi, folded_normal_mean(mu_P, var_P))

    return LaplaceState(
        mu_P=mu_P,
        Sigma_P=Sigma_P,
        mu_t=mu_t,
        Sigma_t=Sigma_t,
        mu_xbar=mu_xbar,
        Sigma_xbar=Sigma_xbar,
        e_theta=shape / rate,
        theta_shape=shape,
        theta_rate=rate,
        mu_eta=mu_eta,
    )


def rebalance_laplace(state: LaplaceState, h: LaplaceHyper) -> LaplaceState:
    """Optimal per-component rescaling p_k -> c_k p_k, t_k -> t_k / c_k.

    The likelihood is invariant under the move; the expected prior cost of P
    (eta held at its mean) and of the scores, minus the entropy gained, is
    separable in u = c_k^2:  a u / 2 + b / (2u) - (m - n) log(u) / 2, with
    a = sum_j E[p_jk^2] / E[eta_jk] and b = sum_i E[t_ki^2]. Mean-field sweeps
    move along this likelihood-flat direction only through the weak loading
    prior, so without the move the fit creeps for thousands of sweeps.
    """
    m, r = state.mu_P.shape
    n = state.mu_t.shape[1]
    e_p2 = state.mu_P ** 2 + np.einsum("jkk->jk", state.Sigma_P)
    a = np.sum(e_p2 / state.mu_eta, axis=0)
    b = np.sum(state.mu_t ** 2, axis=1) + n * np.diag(state.Sigma_t)
    u = ((m - n) + np.sqrt((m - n) ** 2 + 4.0 * a * b)) / (2.0 * a)
    c = np.sqrt(u)
    mu_P = state.mu_P * c
    Sigma_P = state.Sigma_P * np.outer(c, c)
    var_P = np.einsum("jkk->jk", Sigma_P)
    return replace(
        state,
        mu_P=mu_P,
        Sigma_P=Sigma_P,
        mu_t=state.mu_t / c[:, None],
        Sigma_t=symmetrize(state.Sigma_t / np.outer(c, c)),
        mu_eta=eta_mean(h.varphi, folded_normal_mean(mu_P, var_P)),
    )


def relative_change(old: LaplaceState, new: LaplaceState) -> float:
    """Larger of the relative changes in ||E[P]||_F and ||E[t]||_F."""

    def rel(a, b):
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        return abs(nb - na) / max(nb, 1e-300)

    return float(max(rel(old.mu_P, new.mu_P), rel(old.mu_t, new.mu_t)))


def fit_laplace(X, h: LaplaceHyper = LaplaceHyper(), seed: int = 0) -> LaplaceModel:
    Y = _values(X)
    state = init_laplace(Y, h, seed)
    changes = []
    converged = False
    it = 0
    for it in range(1, h.max_iters + 1):
        new = rebalance_laplace(sweep_laplace(state, Y, h), h)
        changes.append(relative_change(state, new))
        state = new
        if changes[-1] < h.tol:
            converged = True
            break
    if not converged:
        log.warning("Laplace VBSPCA did not converge in %d sweeps", h.max_iters)
    return to_model(state, h, converged=converged, n_iter=it, changes=changes)


def to_model(state: LaplaceState, h: LaplaceHyper, converged=True, n_iter=0, changes=()) -> LaplaceModel:
    return LaplaceModel(
        loading=orthonormalize_loading(state.mu_P),
        latent_scale=state.mu_t.var(axis=1, ddof=1),
        noise_precision=float(state.e_theta),
        mean_correction=state.mu_xbar.copy(),
        rank=state.r,
        converged=converged,
        n_iter=n_iter,
        change_trace=tuple(changes),
        hyper=h,
    )


def project_laplace(model, y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.shape[0] != model.loading.shape[0]:
        raise ValueError(f"expected {model.loading.shape[0]} sensors, got {y.shape[0]}")
    return model.loading.T @ y
