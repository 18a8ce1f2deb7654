"""Variational Bayesian sparse PCA with a shared ARD Gaussian prior.

Model (``X`` is sensors x samples, ``k`` candidate components)::

    X = P T^T + Xbar + noise,   noise_ji ~ N(0, 1/beta)
    p_i ~ N(0, I_m / gamma_i),  t_i ~ N(0, I_n / gamma_i),  gamma_i ~ Gam(a0, b0)
    Xbar_ji ~ N(0, 1/alpha_ji), p(alpha_ji) ~ 1/alpha_ji,  p(beta) ~ 1/beta

Columns of ``P`` and ``T`` share the precision ``gamma_i``, so a component
whose ``gamma_i`` diverges is removed from both factors at once (rank
pruning). The posterior is approximated by the mean-field family
``q(P) q(T) q(Xbar) q(gamma) q(alpha) q(beta)`` and fitted by coordinate
ascent on the ELBO.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg
from scipy.special import digamma, gammaln

from .core_data import DataError, DataMatrix
from .linalg_utils import (
    NumericalError,
    gamma_entropy,
    orthonormalize_loading,
    spd_inverse,
    symmetrize,
)

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GaussianHyper:
    a0: float = 1e-5
    b0: float = 1e-5
    r_max: int = 10
    max_iters: int = 500
    tol: float = 1e-6
    prune_threshold: float = 1e6
    # Initial E[alpha] for the entry-wise mean term, as a multiple of the
    # initial E[beta]. Large values start every entry of Xbar switched off.
    alpha_init_ratio: float = 1e3
    # "sensor": Xbar is one mean vector repeated over samples (alpha per
    # sensor). "entry": independent Xbar_ji with its own alpha_ji.
    mean_mode: str = "sensor"

    def __post_init__(self):
        if self.mean_mode not in ("sensor", "entry"):
            raise ValueError("mean_mode must be 'sensor' or 'entry'")
        for name in ("a0", "b0", "tol", "prune_threshold", "alpha_init_ratio"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.r_max < 1:
            raise ValueError("r_max must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")

    def to_dict(self) -> dict:
        return {
            "a0": self.a0,
            "b0": self.b0,
            "r_max": self.r_max,
            "max_iters": self.max_iters,
            "tol": self.tol,
            "prune_threshold": self.prune_threshold,
            "alpha_init_ratio": self.alpha_init_ratio,
            "mean_mode": self.mean_mode,
        }


@dataclass(frozen=True)
class GaussianState:
    """Moments of every mean-field factor.

    ``Sigma_P`` / ``Sigma_T`` are the k x k covariances shared by every row
    of ``P`` / ``T``. Gamma factors are stored as (shape, rate); the
    ``e_*`` fields are the corresponding means.
    """

    mu_P: np.ndarray
    Sigma_P: np.ndarray
    mu_T: np.ndarray
    Sigma_T: np.ndarray
    mu_Xbar: np.ndarray
    Sigma_Xbar: np.ndarray
    e_gamma: np.ndarray
    e_alpha: np.ndarray
    e_beta: float
    active_mask: np.ndarray
    gamma_shape: float
    gamma_rate: np.ndarray
    alpha_rate: np.ndarray
    beta_rate: float

    @property
    def k(self) -> int:
        return self.mu_P.shape[1]

    @property
    def rank(self) -> int:
        return int(self.active_mask.sum())


@dataclass(frozen=True)
class GaussianModel:
    loading: np.ndarray
    latent_scale: np.ndarray
    noise_precision: float
    mean_correction: np.ndarray
    rank: int
    converged: bool = True
    n_iter: int = 0
    elbo_trace: tuple = field(default=(), repr=False)
    hyper: GaussianHyper = field(default_factory=GaussianHyper)

    SCHEMA = "vbspca-gaussian/1"

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
            "elbo_trace": [float(v) for v in self.elbo_trace],
            "hyper": self.hyper.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianModel":
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
            elbo_trace=tuple(d.get("elbo_trace", ())),
            hyper=GaussianHyper(**d["hyper"]),
        )


def _values(X) -> np.ndarray:
    return X.values if isinstance(X, DataMatrix) else np.asarray(X, dtype=float)


def svd_init(Y: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Split the rank-k truncated SVD of ``Y`` evenly between both factors."""
    U, s, Vt = linalg.svd(Y, full_matrices=False)
    # Sign convention makes the factors unique up to degenerate singular values.
    signs = np.sign(U[np.argmax(np.abs(U[:, :k]), axis=0), np.arange(k)])
    signs[signs == 0] = 1.0
    root = np.sqrt(s[:k])
    return U[:, :k] * signs * root, Vt[:k].T * signs * root


def init_state(X, h: GaussianHyper, seed: int = 0) -> GaussianState:
    Y = _values(X)
    m, n = Y.shape
    k = h.r_max
    if k > min(m, n):
        raise ValueError(f"r_max={k} exceeds min(m, n)={min(m, n)}")
    var = Y.var()
    if not var > 0:
        raise DataError("degenerate input: data matrix has zero variance")
    # Perturbation only breaks ties between (near-)equal singular values;
    # it sits far below double-precision resolution of generic data.
    rng = np.random.default_rng(seed)
    jitter = rng.standard_normal(Y.shape) * (1e-14 * np.sqrt(var))
    mu_P, mu_T = svd_init(Y + jitter, k)

    e_beta = 1.0 / var
    e_alpha = np.full((m, n), h.alpha_init_ratio * e_beta)
    gamma_shape = h.a0 + 0.5 * (m + n)
    e_gamma = np.ones(k)
    return GaussianState(
        mu_P=mu_P,
        Sigma_P=np.eye(k) * 1e-2,
        mu_T=mu_T,
        Sigma_T=np.eye(k) * 1e-2,
        mu_Xbar=np.zeros((m, n)),
        Sigma_Xbar=1.0 / ((1 if h.mean_mode == "entry" else n) * e_beta + e_alpha),
        e_gamma=e_gamma,
        e_alpha=e_alpha,
        e_beta=e_beta,
        active_mask=np.ones(k, dtype=bool),
        gamma_shape=gamma_shape,
        gamma_rate=gamma_shape / e_gamma,
        alpha_rate=0.5 / e_alpha,
        beta_rate=0.5 * m * n / e_beta,
    )


def _active_block(S: np.ndarray, a: np.ndarray) -> np.ndarray:
    return S[np.ix_(a, a)]


def _embed_cov(S_active: np.ndarray, a: np.ndarray, e_gamma: np.ndarray) -> np.ndarray:
    # Inactive components keep their (tiny) prior variance on the diagonal.
    full = np.diag(1.0 / e_gamma).astype(float)
    full[np.ix_(a, a)] = S_active
    return full


def expected_sq_residual(state: GaussianState, Y: np.ndarray) -> float:
    """E||X - P T^T - Xbar||_F^2 under the current factors."""
    m, n = Y.shape
    a = state.active_mask
    P, T = state.mu_P[:, a], state.mu_T[:, a]
    SP, ST = _active_block(state.Sigma_P, a), _active_block(state.Sigma_T, a)
    R = Y - P @ T.T - state.mu_Xbar
    PtP, TtT = P.T @ P, T.T @ T
    return float(
        np.sum(R * R)
        + n * np.sum(PtP * ST)
        + m * np.sum(TtT * SP)
        + m * n * np.sum(SP * ST)
        + np.sum(state.Sigma_Xbar)
    )


def gamma_update(a0, b0, m, n, epp, ett):
    """Shared ARD precision factor: returns (shape, rate, mean)."""
    shape = a0 + 0.5 * (m + n)
    rate = b0 + 0.5 * (np.asarray(epp, float) + np.asarray(ett, float))
    return shape, rate, shape / rate


def sweep_gaussian(state: GaussianState, X, h: GaussianHyper) -> GaussianState:
    """One coordinate-ascent pass: P, T, Xbar, gamma, alpha, beta."""
    Y = _values(X)
    m, n = Y.shape
    a = state.active_mask
    beta = state.e_beta
    gam = state.e_gamma[a]

    Yc = Y - state.mu_Xbar
    T = state.mu_T[:, a]
    ETT = T.T @ T + n * _active_block(state.Sigma_T, a)
    SP = spd_inverse(beta * ETT + np.diag(gam), "Sigma_P")
    P = beta * (Yc @ T) @ SP

    EPP = P.T @ P + m * SP
    ST = spd_inverse(beta * EPP + np.diag(gam), "Sigma_T")
    T = beta * (Yc.T @ P) @ ST

    R = Y - P @ T.T
    if h.mean_mode == "entry":
        Sx = 1.0 / (beta + state.e_alpha)
        mux = beta * Sx * R
    else:
        sx = 1.0 / (n * beta + state.e_alpha[:, 0])
        Sx = np.repeat(sx[:, None], n, axis=1)
        mux = np.repeat((beta * sx * R.sum(axis=1))[:, None], n, axis=1)

    epp = np.sum(P * P, axis=0) + m * np.diag(SP)
    ett = np.sum(T * T, axis=0) + n * np.diag(ST)
    gamma_rate = state.gamma_rate.copy()
    _, gamma_rate[a], _ = gamma_update(h.a0, h.b0, m, n, epp, ett)
    e_gamma = state.gamma_shape / gamma_rate

    alpha_rate = 0.5 * (mux * mux + Sx)
    e_alpha = 0.5 / alpha_rate

    mu_P = np.zeros_like(state.mu_P)
    mu_T = np.zeros_like(state.mu_T)
    mu_P[:, a] = P
    mu_T[:, a] = T
    new = replace(
        state,
        mu_P=mu_P,
        Sigma_P=_embed_cov(SP, a, e_gamma),
        mu_T=mu_T,
        Sigma_T=_embed_cov(ST, a, e_gamma),
        mu_Xbar=mux,
        Sigma_Xbar=Sx,
        e_gamma=e_gamma,
        gamma_rate=gamma_rate,
        e_alpha=e_alpha,
        alpha_rate=alpha_rate,
    )
    S = expected_sq_residual(new, Y)
    if not (np.isfinite(S) and S > 0):
        raise NumericalError(f"expected squared residual is {S!r}")
    return replace(new, e_beta=m * n / S, beta_rate=0.5 * S)


def rebalance_scales(state: GaussianState) -> GaussianState:
    """Optimal per-component rescaling p_i -> c p_i, t_i -> t_i / c.

    The expected likelihood (trace terms included) is invariant under this
    move; only the shared-precision prior and the two Gaussian entropies
    depend on ``c``. Maximizing them in closed form removes the slow scale
    drift that plain coordinate ascent exhibits, and never lowers the ELBO.
    """
    a = state.active_mask
    m, n = state.mu_P.shape[0], state.mu_T.shape[0]
    idx = np.flatnonzero(a)
    SP, ST = state.Sigma_P, state.Sigma_T
    epp = np.sum(state.mu_P[:, idx] ** 2, axis=0) + m * np.diag(SP)[idx]
    ett = np.sum(state.mu_T[:, idx] ** 2, axis=0) + n * np.diag(ST)[idx]
    g = state.e_gamma[idx]
    # stationarity in u = c^2:  g*epp*u^2 - (m - n)*u - g*ett = 0
    u = ((m - n) + np.sqrt((m - n) ** 2 + 4.0 * g * g * epp * ett)) / (2.0 * g * epp)
    c = np.ones(state.k)
    c[idx] = np.sqrt(u)
    return replace(
        state,
        mu_P=state.mu_P * c,
        mu_T=state.mu_T / c,
        Sigma_P=symmetrize(SP * np.outer(c, c)),
        Sigma_T=symmetrize(ST / np.outer(c, c)),
    )


def elbo_terms(state: GaussianState, X, h: GaussianHyper) -> dict:
    """ELBO broken into named contributions (improper-prior constants dropped)."""
    Y = _values(X)
    m, n = Y.shape
    a = state.active_mask
    k = int(a.sum())
    SP, ST = _active_block(state.Sigma_P, a), _active_block(state.Sigma_T, a)
    P, T = state.mu_P[:, a], state.mu_T[:, a]

    mn = m * n
    beta_shape = 0.5 * mn
    e_beta = beta_shape / state.beta_rate
    eln_beta = digamma(beta_shape) - np.log(state.beta_rate)

    g_rate = state.gamma_rate[a]
    e_gam = state.gamma_shape / g_rate
    eln_gam = digamma(state.gamma_shape) - np.log(g_rate)
    epp = np.sum(P * P, axis=0) + m * np.diag(SP)
    ett = np.sum(T * T, axis=0) + n * np.diag(ST)

    # In sensor mode the broadcast columns are identical; score one of them.
    cols = slice(None) if h.mean_mode == "entry" else slice(0, 1)
    alpha_rate = state.alpha_rate[:, cols]
    Sx = state.Sigma_Xbar[:, cols]
    e_alpha = 0.5 / alpha_rate
    eln_alpha = digamma(0.5) - np.log(alpha_rate)
    ex2 = state.mu_Xbar[:, cols] ** 2 + Sx

    S = expected_sq_residual(state, Y)
    _, logdet_P = np.linalg.slogdet(SP)
    _, logdet_T = np.linalg.slogdet(ST)

    terms = {
        "lik": 0.5 * mn * (eln_beta - LOG_2PI) - 0.5 * e_beta * S,
        "prior_P": float(np.sum(0.5 * m * (eln_gam - LOG_2PI) - 0.5 * e_gam * epp)),
        "prior_T": float(np.sum(0.5 * n * (eln_gam - LOG_2PI) - 0.5 * e_gam * ett)),
        "prior_Xbar": float(np.sum(0.5 * (eln_alpha - LOG_2PI) - 0.5 * e_alpha * ex2)),
        "prior_alpha": float(-np.sum(eln_alpha)),
        "prior_gamma": float(
            np.sum(
                h.a0 * np.log(h.b0)
                - gammaln(h.a0)
                + (h.a0 - 1.0) * eln_gam
                - h.b0 * e_gam
            )
        ),
        "prior_beta": float(-eln_beta),
        "ent_P": 0.5 * m * (k * (1.0 + LOG_2PI) + logdet_P),
        "ent_T": 0.5 * n * (k * (1.0 + LOG_2PI) + logdet_T),
        "ent_Xbar": float(np.sum(0.5 * (1.0 + LOG_2PI + np.log(Sx)))),
        "ent_gamma": float(np.sum(gamma_entropy(state.gamma_shape, g_rate))),
        "ent_alpha": float(np.sum(gamma_entropy(0.5, alpha_rate))),
        "ent_beta": float(gamma_entropy(beta_shape, state.beta_rate)),
    }
    return terms


def compute_elbo(state: GaussianState, X, h: GaussianHyper) -> float:
    terms = elbo_terms(state, X, h)
    total = float(sum(terms.values()))
    if not np.isfinite(total):
        detail = ", ".join(f"{k}={v:.6g}" for k, v in terms.items())
        raise NumericalError(f"non-finite ELBO: {detail}")
    return total


def _deactivate(state: GaussianState, drop: np.ndarray) -> GaussianState:
    mask = state.active_mask & ~drop
    if not mask.any():
        raise NumericalError("all components pruned: degenerate fit")
    mu_P, mu_T = state.mu_P.copy(), state.mu_T.copy()
    mu_P[:, drop] = 0.0
    mu_T[:, drop] = 0.0
    SP, ST = state.Sigma_P.copy(), state.Sigma_T.copy()
    for S in (SP, ST):
        S[drop, :] = 0.0
        S[:, drop] = 0.0
        S[drop, drop] = 1.0 / state.e_gamma[drop]
    log.debug("pruned components %s", np.flatnonzero(drop).tolist())
    return replace(state, mu_P=mu_P, mu_T=mu_T, Sigma_P=SP, Sigma_T=ST, active_mask=mask)


def prune(state: GaussianState, h: GaussianHyper) -> GaussianState:
    """Deactivate components whose ARD precision exceeded the threshold."""
    drop = state.active_mask & (state.e_gamma > h.prune_threshold)
    if not drop.any():
        return state
    return _deactivate(state, drop)


def prune_by_evidence(state: GaussianState, X, h: GaussianHyper, elbo: float | None = None):
    """Drop the highest-precision component if the bound does not get worse.

    Under coordinate ascent a dead component's precision only grows like
    sqrt(iterations), so the absolute threshold is reached far too late.
    Removing it outright and comparing bounds settles the question directly.
    Returns ``(state, elbo)``.
    """
    if elbo is None:
        elbo = compute_elbo(state, X, h)
    if state.rank <= 1:
        return state, elbo
    gam = np.where(state.active_mask, state.e_gamma, -np.inf)
    i = int(np.argmax(gam))
    drop = np.zeros(state.k, dtype=bool)
    drop[i] = True
    candidate = _deactivate(state, drop)
    cand_elbo = compute_elbo(candidate, X, h)
    if cand_elbo >= elbo:
        return candidate, cand_elbo
    return state, elbo


def check_state(state: GaussianState) -> None:
    for name in ("Sigma_P", "Sigma_T"):
        S = getattr(state, name)
        if not np.allclose(S, S.T, atol=1e-12):
            raise NumericalError(f"{name} is not symmetric")
        if np.linalg.eigvalsh(S).min() <= 0:
            raise NumericalError(f"{name} is not positive definite")
    if state.e_beta <= 0 or np.any(state.e_gamma <= 0) or np.any(state.e_alpha <= 0):
        raise NumericalError("non-positive precision expectation")


def fit_gaussian(X, h: GaussianHyper = GaussianHyper(), seed: int = 0, debug: bool = False) -> GaussianModel:
    """Fit by alternating sweeps and ARD pruning until the ELBO settles."""
    Y = _values(X)
    m, n = Y.shape
    h = replace(h, r_max=min(h.r_max, m, n))
    state = init_state(Y, h, seed)
    trace = [compute_elbo(state, Y, h)]
    converged = False
    it = 0
    for it in range(1, h.max_iters + 1):
        state = rebalance_scales(sweep_gaussian(state, Y, h))
        if debug:
            check_state(state)
        rank_before = state.rank
        state = prune(state, h)
        state, elbo = prune_by_evidence(state, Y, h)
        trace.append(elbo)
        change = abs(elbo - trace[-2]) / max(abs(elbo), 1e-300)
        if state.rank == rank_before and change < h.tol:
            converged = True
            break
    if not converged:
        log.warning("Gaussian VBSPCA did not converge in %d sweeps", h.max_iters)
    return to_model(state, h, converged=converged, n_iter=it, trace=trace)


def to_model(state: GaussianState, h: GaussianHyper, converged=True, n_iter=0, trace=()) -> GaussianModel:
    a = state.active_mask
    loading = orthonormalize_loading(state.mu_P[:, a])
    return GaussianModel(
        loading=loading,
        latent_scale=state.mu_T[:, a].var(axis=0, ddof=1),
        noise_precision=float(state.e_beta),
        mean_correction=state.mu_Xbar.mean(axis=1),
        rank=int(a.sum()),
        converged=converged,
        n_iter=n_iter,
        elbo_trace=tuple(trace),
        hyper=h,
    )


def project_gaussian(model, y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.shape[0] != model.loading.shape[0]:
        raise ValueError(f"expected {model.loading.shape[0]} sensors, got {y.shape[0]}")
    return model.loading.T @ y
