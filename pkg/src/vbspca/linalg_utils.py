"""Small numerical helpers shared by the two VBSPCA variants."""
import numpy as np
from scipy import linalg
from scipy.special import digamma, gammaln


class NumericalError(ArithmeticError):
    """A posterior quantity left its valid domain (non-PD covariance, etc.)."""


def symmetrize(S):
    return 0.5 * (S + S.T)


def spd_inverse(A, name="matrix"):
    """Inverse of a symmetric positive definite matrix via Cholesky."""
    A = symmetrize(np.asarray(A, dtype=float))
    try:
        c = linalg.cho_factor(A, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        eig = np.linalg.eigvalsh(A) if np.all(np.isfinite(A)) else [np.nan]
        raise NumericalError(
            f"{name}: precision not positive definite (min eigenvalue {np.min(eig):.3e})"
        ) from exc
    inv = linalg.cho_solve(c, np.eye(A.shape[0]))
    return symmetrize(inv)


def gamma_entropy(shape, rate):
    """Entropy of Gam(shape, rate) (rate parameterization)."""
    return shape - np.log(rate) + gammaln(shape) + (1.0 - shape) * digamma(shape)


def orthonormalize_loading(P):
    """QR-orthonormalize columns; each column's largest-magnitude entry is positive."""
    P = np.asarray(P, dtype=float)
    if P.shape[1] == 0:
        return P.copy()
    Q, _ = np.linalg.qr(P)
    idx = np.argmax(np.abs(Q), axis=0)
    signs = np.sign(Q[idx, np.arange(Q.shape[1])])
    signs[signs == 0] = 1.0
    return Q * signs
