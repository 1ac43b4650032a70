"""Pairwise discrepancy estimation by subgradient ascent.

For every device pair the estimator climbs ``|L_k(w) - L_j(w)|`` from a
shared Gaussian starting point and records the largest gap it sees.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import FederationData
from .nn import LossSpec, ModelParams, architecture, gaussian_params, loss_and_gradient


@dataclass(frozen=True)
class DdeConfig:
    iterations: int = 50
    eta: float = 0.05
    init_seed: int = 0
    init_std: float = 1.0
    subset: str = "train"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if not self.init_std >= 0:
            raise ValueError("init_std must be non-negative")


def _gap_and_subgrad(w, shard_k, shard_j, loss, subset, loss_fn):
    lk, gk = loss_fn(w, shard_k, subset, loss)
    lj, gj = loss_fn(w, shard_j, subset, loss)
    s = np.sign(lk - lj)
    return abs(lk - lj), s * (gk - gj)


def subgrad_delta(w: ModelParams, shard_k, shard_j, loss: LossSpec = LossSpec(),
                  subset="train", loss_fn=loss_and_gradient) -> np.ndarray:
    """sign(L_k - L_j) * (grad L_k - grad L_j); zero when the losses tie."""
    return _gap_and_subgrad(w, shard_k, shard_j, loss, subset, loss_fn)[1]


def dde_pair(w0: ModelParams, shard_k, shard_j, cfg: DdeConfig,
             loss: LossSpec = LossSpec(), loss_fn=loss_and_gradient):
    """Running maximum of the loss gap along the ascent path.

    Returns the estimate and the per-iterate running maxima (length
    ``iterations + 1``, starting at ``w0``).
    """
    w = w0
    best, trace = 0.0, []
    for t in range(cfg.iterations + 1):
        gap, g = _gap_and_subgrad(w, shard_k, shard_j, loss, cfg.subset, loss_fn)
        best = max(best, gap)
        trace.append(best)
        if t < cfg.iterations:
            w = w.with_values(w.values + cfg.eta * g)
    return best, trace


def dde_run(data: FederationData, cfg: DdeConfig = DdeConfig(), loss: LossSpec = LossSpec(),
            w0: ModelParams | None = None, hidden=(32,), activation="relu",
            loss_fn=loss_and_gradient) -> np.ndarray:
    """Estimate the N x N discrepancy matrix.

    ``w0`` defaults to N(0, init_std^2 I) over the default architecture,
    drawn once from ``cfg.init_seed`` and reused for every pair.
    """
    N = data.N
    if w0 is None:
        dims = architecture(data.d_in, data.n_classes, hidden)
        w0 = gaussian_params(dims, activation, cfg.init_seed, cfg.init_std)
    dhat = np.zeros((N, N))
    for j in range(N):
        for k in range(j + 1, N):
            est, _ = dde_pair(w0, data.shards[k], data.shards[j], cfg, loss, loss_fn)
            dhat[j, k] = dhat[k, j] = min(est, loss.bound_M)
    return dhat


def check_discrepancy(dhat, bound_M: float = np.inf, atol: float = 0.0) -> np.ndarray:
    dhat = np.asarray(dhat, dtype=np.float64)
    if dhat.ndim != 2 or dhat.shape[0] != dhat.shape[1]:
        raise ValueError("discrepancy matrix must be square")
    if not np.allclose(dhat, dhat.T, atol=atol, rtol=0):
        raise ValueError("discrepancy matrix must be symmetric")
    if np.any(np.diag(dhat) != 0):
        raise ValueError("discrepancy matrix must have a zero diagonal")
    if np.any(dhat < 0) or np.any(dhat > bound_M):
        raise ValueError(f"discrepancies must lie in [0, {bound_M}]")
    return dhat


def save_discrepancy_csv(path, dhat, ids=None):
    dhat = np.asarray(dhat)
    ids = list(ids) if ids is not None else list(range(dhat.shape[0]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ids)
        for row in dhat:
            w.writerow([repr(float(v)) for v in row])


def load_discrepancy_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return check_discrepancy(np.array([[float(v) for v in r] for r in rows[1:]]))
