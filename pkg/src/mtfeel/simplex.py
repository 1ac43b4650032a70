"""Sign operator and Euclidean projection onto the probability simplex."""
import numpy as np


def sign_vec(v) -> np.ndarray:
    """Componentwise sign with sign(0) = 0, returned as int8."""
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v).astype(np.int8)


def project_simplex(v) -> np.ndarray:
    """Euclidean projection of ``v`` onto {x : x >= 0, sum(x) = 1}.

    Sort-and-threshold algorithm: find the largest ``rho`` with
    ``u_rho > (sum_{i<=rho} u_i - 1) / rho`` for ``u`` sorted descending,
    then clip ``v - tau`` at zero.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("expected a non-empty 1-d vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("entries must be finite")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ks = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / ks > 0)[0][-1]
    tau = css[rho] / (rho + 1)
    x = np.maximum(v - tau, 0.0)
    # tiny renormalisation so the sum is 1 to rounding
    return x / x.sum()


def projected_gradient(z, g, mu: float) -> np.ndarray:
    """(z - P(z - mu * g)) / mu with P the simplex projection."""
    if not mu > 0:
        raise ValueError("mu must be positive")
    z = np.asarray(z, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    return (z - project_simplex(z - mu * g)) / mu
