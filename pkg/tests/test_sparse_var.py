import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import lasso_by_sign_patterns, naive_lagged, naive_var_predict
from vbspca.core_data import DataError
from vbspca.sparse_var import (
    VarModel,
    acf,
    build_lagged,
    coordinate_descent,
    kkt_residual,
    lambda_grid,
    lambda_max,
    lasso_fit,
    lasso_objective,
    predict_series,
    residual_acf,
    select_lambda,
    soft_threshold,
    suggest_order,
    var_predict,
)


def var1_series(seed, r=3, L=400, rho=0.6):
    rng = np.random.default_rng(seed)
    A = rho * np.linalg.qr(rng.standard_normal((r, r)))[0]
    T = np.zeros((r, L))
    for k in range(1, L):
        T[:, k] = A @ T[:, k - 1] + rng.standard_normal(r)
    return T, A


# ---- build_lagged ---------------------------------------------------------------

def test_hand_stacking_example():
    d = build_lagged(np.array([[1.0, 2.0, 3.0, 4.0]]), 2)
    np.testing.assert_array_equal(d.Z, [[3.0], [4.0]])
    np.testing.assert_array_equal(d.Q, [[2.0, 1.0], [3.0, 2.0]])


def test_single_row_design():
    T = np.arange(10.0).reshape(2, 5)
    d = build_lagged(T, 4)
    assert d.Z.shape == (1, 2) and d.Q.shape == (1, 8)
    np.testing.assert_array_equal(d.Z[0], T[:, 4])
    np.testing.assert_array_equal(d.Q[0], np.concatenate([T[:, 3], T[:, 2], T[:, 1], T[:, 0]]))


@pytest.mark.parametrize("tau", [1, 2, 3])
def test_design_matches_index_oracle(tau):
    T = np.random.default_rng(tau).standard_normal((2, 17))
    d = build_lagged(T, tau)
    Z, Q = naive_lagged(T, tau)
    np.testing.assert_array_equal(d.Z, Z)
    np.testing.assert_array_equal(d.Q, Q)


def test_build_lagged_errors():
    with pytest.raises(ValueError):
        build_lagged(np.ones((2, 3)), 3)
    with pytest.raises(ValueError):
        build_lagged(np.ones((2, 3)), 0)
    with pytest.raises(ValueError):
        build_lagged(np.ones(5), 1)


# ---- lasso ----------------------------------------------------------------------

def test_soft_threshold():
    assert soft_threshold(3.0, 1.0) == 2.0
    assert soft_threshold(-3.0, 1.0) == -2.0
    assert soft_threshold(0.5, 1.0) == 0.0


def test_lambda_zero_matches_least_squares():
    rng = np.random.default_rng(0)
    Q = rng.standard_normal((60, 4))
    z = rng.standard_normal(60)
    w, _, ok = coordinate_descent(Q, z, 0.0)
    ref = np.linalg.solve(Q.T @ Q, Q.T @ z)
    assert ok
    np.testing.assert_allclose(w, ref, rtol=0, atol=1e-8)


def test_lambda_zero_lasso_fit_matches_ols_with_intercept():
    T, _ = var1_series(1, r=2, L=200)
    d = build_lagged(T, 2)
    model = lasso_fit(d, 0.0)
    X = np.hstack([np.ones((d.Q.shape[0], 1)), d.Q])
    coef = np.linalg.lstsq(X, d.Z, rcond=None)[0]
    np.testing.assert_allclose(model.intercept, coef[0], atol=1e-8)
    np.testing.assert_allclose(model.omega, coef[1:], atol=1e-8)


def test_large_lambda_gives_exact_zero():
    rng = np.random.default_rng(2)
    Q = rng.standard_normal((30, 5))
    z = rng.standard_normal(30)
    lam = np.abs(Q.T @ z).max()
    w, cycles, ok = coordinate_descent(Q, z, lam)
    assert ok and cycles == 1 and np.all(w == 0.0)
    d = build_lagged(rng.standard_normal((2, 40)), 2)
    assert np.all(lasso_fit(d, lambda_max(d)).omega == 0.0)
    lam_raw = max(np.abs(d.Q.T @ d.Z[:, c]).max() for c in range(2))
    assert np.all(lasso_fit(d, lam_raw, center=False).omega == 0.0)


def test_three_coefficient_example_matches_sign_oracle():
    rng = np.random.default_rng(3)
    Q = rng.standard_normal((12, 3))
    z = Q @ np.array([1.0, 0.0, -0.3]) + 0.2 * rng.standard_normal(12)
    w, _, _ = coordinate_descent(Q, z, 0.5)
    w_ref, f_ref = lasso_by_sign_patterns(Q, z, 0.5)
    assert lasso_objective(Q, z, w, 0.5) == pytest.approx(f_ref, abs=1e-9)
    np.testing.assert_allclose(w, w_ref, atol=1e-6)


def test_non_finite_design_rejected():
    Q = np.ones((4, 2))
    Q[1, 1] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        coordinate_descent(Q, np.ones(4), 0.1)
    with pytest.raises(ValueError):
        coordinate_descent(np.ones((4, 2)), np.ones(4), -1.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
def test_kkt_holds_at_solution(seed, frac):
    rng = np.random.default_rng(seed)
    p = int(rng.integers(1, 7))
    Q = rng.standard_normal((int(rng.integers(p + 1, 40)), p))
    z = rng.standard_normal(Q.shape[0])
    lam = frac * np.abs(Q.T @ z).max()
    w, _, ok = coordinate_descent(Q, z, lam)
    assert ok
    g = Q.T @ (z - Q @ w)
    assert np.all(np.abs(g) <= lam + 1e-6)
    act = w != 0
    np.testing.assert_allclose(g[act], lam * np.sign(w[act]), atol=1e-6)
    assert kkt_residual(Q, z, w, lam) <= 1e-6


def test_objective_non_increasing_over_cycles():
    rng = np.random.default_rng(4)
    Q = rng.standard_normal((50, 8)) @ (np.eye(8) + 0.9 * rng.standard_normal((8, 8)))
    z = rng.standard_normal(50)
    trace = []
    coordinate_descent(Q, z, 0.3, trace=trace)
    start = lasso_objective(Q, z, np.zeros(8), 0.3)
    seq = np.array([start] + trace)
    assert len(trace) > 3
    assert np.all(np.diff(seq) <= 1e-12 * np.abs(seq[:-1]))


@pytest.mark.parametrize("lam", [0.05, 0.5, 2.0])
def test_solution_path_continuity(lam):
    T, _ = var1_series(5, r=3, L=150)
    d = build_lagged(T, 2)
    base = lasso_fit(d, lam).omega
    gaps = [np.linalg.norm(lasso_fit(d, lam + delta).omega - base) for delta in (1e-1, 1e-3, 1e-5)]
    assert gaps[0] >= gaps[1] >= gaps[2]
    assert gaps[2] < 1e-4


def test_lambda_grid_spans_range():
    T, _ = var1_series(6)
    d = build_lagged(T, 2)
    g = lambda_grid(d)
    assert len(g) == 20
    assert g[0] == pytest.approx(1e-4 * lambda_max(d))
    assert g[-1] == pytest.approx(lambda_max(d))


def test_select_lambda_returns_grid_point_and_recovers_dynamics():
    T, A = var1_series(7, r=3, L=600)
    d = build_lagged(T, 2)
    lam, grid, err = select_lambda(d)
    assert lam in grid and err.shape == grid.shape
    assert err[np.searchsorted(grid, lam)] == err.min()
    model = lasso_fit(d, lam)
    # the lag-1 block estimates the transpose of the generating matrix
    np.testing.assert_allclose(model.block(1), A.T, atol=0.15)
    assert np.abs(model.block(2)).max() < 0.15


def test_select_lambda_too_short():
    d = build_lagged(np.random.default_rng(0).standard_normal((2, 10)), 2)
    with pytest.raises(ValueError):
        select_lambda(d)


def test_suggest_order_finds_true_lag():
    # AIC never underfits a strong lag-3 process and picks it most of the time
    picks = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        T = np.zeros((2, 3000))
        for k in range(3, T.shape[1]):
            T[:, k] = 0.5 * T[:, k - 3] + rng.standard_normal(2)
        picks.append(suggest_order(T, max_tau=5))
    assert min(picks) == 3
    assert max(set(picks), key=picks.count) == 3
    with pytest.raises(ValueError):
        suggest_order(np.ones((2, 10)), max_tau=5)


# ---- prediction -----------------------------------------------------------------

def test_predict_examples():
    zero = VarModel(np.zeros((6, 3)), 2, 0.0, 3)
    assert np.all(var_predict(zero, np.ones((3, 2))) == 0)
    ident = VarModel(np.eye(3), 1, 0.0, 3)
    h = np.array([[1.0], [2.0], [3.0]])
    np.testing.assert_array_equal(var_predict(ident, h), [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        var_predict(zero, np.ones((3, 1)))


def test_predict_matches_triple_loop():
    rng = np.random.default_rng(9)
    r, tau = 3, 4
    omega = rng.standard_normal((r * tau, r))
    H = rng.standard_normal((r, tau))
    model = VarModel(omega, tau, 0.1, r)
    np.testing.assert_allclose(var_predict(model, H), naive_var_predict(omega, H, r, tau), rtol=0, atol=1e-12)


def test_predict_consistent_with_design_rows():
    T, _ = var1_series(10, r=3, L=50)
    d = build_lagged(T, 3)
    model = lasso_fit(d, 0.1)
    r = 3
    rows = np.array([var_predict(model, d.Q[k].reshape(3, r).T) for k in range(d.Q.shape[0])])
    np.testing.assert_array_equal(rows, np.array([model.intercept + q @ model.omega for q in d.Q]))
    np.testing.assert_allclose(rows, model.intercept + d.Q @ model.omega, rtol=0, atol=1e-14)
    np.testing.assert_allclose(predict_series(model, T), rows.T, rtol=0, atol=1e-14)


def test_var_model_validation_and_round_trip():
    with pytest.raises(ValueError):
        VarModel(np.zeros((3, 3)), 2, 0.0, 3)
    with pytest.raises(ValueError):
        VarModel(np.full((3, 3), np.inf), 1, 0.0, 3)
    m = VarModel(np.arange(8.0).reshape(4, 2) / 7, 2, 0.25, 2, np.array([0.1, -0.2]))
    back = VarModel.from_dict(m.to_dict())
    np.testing.assert_array_equal(back.omega, m.omega)
    np.testing.assert_array_equal(back.intercept, m.intercept)
    assert (back.tau, back.lam, back.r) == (2, 0.25, 2)
    assert m.to_dict()["lambda"] == 0.25
    with pytest.raises(DataError):
        VarModel.from_dict(m.to_dict() | {"schema": "x"})


# ---- residual autocorrelation ---------------------------------------------------

def test_white_noise_within_bartlett_bands():
    inside = total = 0
    for seed in range(20):
        T = np.random.default_rng(seed).standard_normal((2, 300))
        d = build_lagged(T, 1)
        model = lasso_fit(d, select_lambda(d)[0])
        rho = residual_acf(T, model, 20)
        band = 2.0 / np.sqrt(T.shape[1] - 1)
        inside += int(np.sum(np.abs(rho) < band))
        total += rho.size
    assert inside / total >= 0.9


def test_zero_residuals_give_zero_acf():
    T = np.ones((2, 30))
    model = VarModel(np.eye(2), 1, 0.0, 2)
    np.testing.assert_array_equal(residual_acf(T, model, 5), np.zeros((2, 5)))


def test_ar1_residuals_whitened():
    rng = np.random.default_rng(11)
    L = 2000
    T = np.zeros((1, L))
    for k in range(1, L):
        T[0, k] = 0.8 * T[0, k - 1] + rng.standard_normal()
    assert acf(T, 1)[0, 0] > 0.7
    d = build_lagged(T, 1)
    model = lasso_fit(d, select_lambda(d)[0])
    assert abs(residual_acf(T, model, 3)[0, 0]) < 0.1


def test_acf_errors():
    model = VarModel(np.eye(1), 1, 0.0, 1)
    with pytest.raises(ValueError):
        residual_acf(np.ones((1, 5)), model, 4)
    with pytest.raises(ValueError):
        residual_acf(np.ones((1, 50)), model, 0)
