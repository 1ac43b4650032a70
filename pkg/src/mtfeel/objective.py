"""Discrepancy-weighted training objective and its gradients.

Notation: ``lam`` is the fixed device-mixture vector, ``alpha`` the N x N
importance matrix (rows on the simplex), ``dhat`` the estimated discrepancy
matrix and ``log_term`` the scalar ``log(|cover| / delta)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import LossSpec, empirical_loss


@dataclass(frozen=True)
class PenaltyConfig:
    lam: np.ndarray
    sample_counts: np.ndarray
    gamma: np.ndarray | None = None
    bound_M: float = 10.0
    delta: float = 0.05
    log_cover: float = 2.0

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=np.float64)
        n = np.asarray(self.sample_counts, dtype=np.float64)
        gamma = np.zeros_like(lam) if self.gamma is None else np.asarray(self.gamma, dtype=np.float64)
        if lam.ndim != 1 or n.shape != lam.shape or gamma.shape != lam.shape:
            raise ValueError("lam, sample_counts and gamma must be vectors of length N")
        if np.any(lam < 0) or abs(lam.sum() - 1.0) > 1e-9:
            raise ValueError("lam must lie on the simplex")
        if np.any(n < 1):
            raise ValueError("sample counts must be >= 1")
        if np.any(gamma < 0):
            raise ValueError("gamma must be non-negative")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.bound_M < 0:
            raise ValueError("bound_M must be non-negative")
        if self.log_term < 0:
            raise ValueError("log_cover - log(delta) must be non-negative")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "sample_counts", n)
        object.__setattr__(self, "gamma", gamma)

    @classmethod
    def uniform(cls, sample_counts, **kw) -> "PenaltyConfig":
        N = len(sample_counts)
        return cls(lam=np.full(N, 1.0 / N), sample_counts=sample_counts, **kw)

    @property
    def N(self) -> int:
        return self.lam.size

    @property
    def log_term(self) -> float:
        return float(self.log_cover - np.log(self.delta))


def _weighted_mass(alpha, cfg):
    """sum_{k,j} (lam_k alpha_kj / n_j)^2"""
    return float(np.sum((cfg.lam[:, None] * np.asarray(alpha) / cfg.sample_counts[None, :]) ** 2))


def _root_term(alpha, cfg):
    return np.sqrt(0.5 * cfg.N * _weighted_mass(alpha, cfg) * cfg.log_term)


def pen(alpha, dhat, cfg: PenaltyConfig) -> float:
    """Concentration term plus (1/M) * sum lam_k alpha_kj d_kj."""
    alpha = np.asarray(alpha, dtype=np.float64)
    bias = np.sum(cfg.lam[:, None] * alpha * np.asarray(dhat))
    return float(_root_term(alpha, cfg) + (bias / cfg.bound_M if bias else 0.0))


def reg_k(k: int, alpha, cfg: PenaltyConfig) -> float:
    """Device k's equal share (M/N) of the scaled concentration term."""
    return float(cfg.bound_M / cfg.N * _root_term(alpha, cfg))


def mtfeel_objective(W, alpha, dhat, data, cfg: PenaltyConfig, loss: LossSpec = LossSpec(),
                     losses=None) -> float:
    """Weighted empirical risk + sum_k gamma_k ||w_k|| + M * pen.

    ``losses[k, j]`` may be supplied as the precomputed training loss of
    model k on device j.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if losses is None:
        losses = loss_matrix(W, data, loss)
    risk = np.sum(cfg.lam[:, None] * alpha * losses)
    reg = sum(g * np.linalg.norm(w.values) for g, w in zip(cfg.gamma, W))
    return float(risk + reg + cfg.bound_M * pen(alpha, dhat, cfg))


def loss_matrix(W, data, loss: LossSpec = LossSpec(), subset="train") -> np.ndarray:
    N = len(W)
    return np.array([[empirical_loss(W[k], data.shards[j], subset, loss) for j in range(N)]
                     for k in range(N)])


def signed_grad_w(k: int, W, alpha, sign_reports, cfg: PenaltyConfig) -> np.ndarray:
    """lam_k * sum_m alpha_km * s_m + gamma_k * sign(w_k)."""
    reports = np.asarray(sign_reports, dtype=np.float64)
    g = cfg.lam[k] * (np.asarray(alpha)[k] @ reports)
    if cfg.gamma[k]:
        g = g + cfg.gamma[k] * np.sign(W[k].values)
    return g


def grad_alpha_row(k: int, alpha, dhat, losses, cfg: PenaltyConfig) -> np.ndarray:
    """Gradient of the objective with respect to row ``alpha[k]``.

    ``losses[m]`` is the empirical loss of model k on device m.  The root
    term contributes ``M sqrt(N/2 log_term) lam_k^2 alpha_km / n_m^2 / sqrt(S)``
    with ``S`` the weighted mass; it is taken as 0 when ``S == 0``.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    lam_k = cfg.lam[k]
    g = lam_k * (np.asarray(losses, dtype=np.float64) + np.asarray(dhat)[k])
    S = _weighted_mass(alpha, cfg)
    if S > 0 and cfg.log_term > 0:
        coef = cfg.bound_M * np.sqrt(0.5 * cfg.N * cfg.log_term) / np.sqrt(S)
        g = g + coef * lam_k ** 2 * alpha[k] / cfg.sample_counts ** 2
    return g


def lipschitz_constants(k: int, cfg: PenaltyConfig, d: int):
    """(beta', beta, U) for device k and model dimension d."""
    M, N, lam_k = cfg.bound_M, cfg.N, cfg.lam[k]
    beta_p = M / np.sqrt(2 * N) * np.sqrt(cfg.log_term)
    beta = beta_p + 2 * lam_k * M
    return float(beta_p), float(beta), float(beta + lam_k * d)
