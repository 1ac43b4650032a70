"""Federated training loops: MtFEEL and the comparison baselines.

Every algorithm works on a :class:`FederationState` holding one model per
device.  Shared-model baselines (FedSGD, signed FedSGD, FedAvg) keep N
identical copies so that metrics are computed the same way everywhere.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelConfig, device_streams, transmit
from .data import FederationData
from .nn import LossSpec, ModelParams, architecture, grouped_loss_grad, init_params, predict
from .objective import (PenaltyConfig, grad_alpha_row, lipschitz_constants, mtfeel_objective,
                        signed_grad_w)
from .simplex import project_simplex, projected_gradient, sign_vec

ALGORITHMS = ("mtfeel", "local", "fedsgd", "sign_fedsgd", "fedavg")
SCHEDULES = ("constant", "one_over_sqrtT", "inv_sqrt_t")


class DivergenceError(FloatingPointError):
    def __init__(self, round_index: int, what: str = "parameters"):
        super().__init__(f"non-finite {what} in round {round_index}")
        self.round = round_index


@dataclass(frozen=True)
class TrainConfig:
    rounds: int = 300
    eta: float = 0.05
    mu: float = 0.5
    batch_size: int = 20
    batch_equals_rounds: bool = False
    local_epochs: int = 5
    seed: int = 0
    lr_schedule: str = "constant"
    hidden: tuple = (32,)
    activation: str = "relu"
    diagnostics: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not (self.eta > 0 and self.mu > 0):
            raise ValueError("eta and mu must be positive")
        if self.batch_size < 1 or self.local_epochs < 1:
            raise ValueError("batch_size and local_epochs must be >= 1")
        if self.lr_schedule not in SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {SCHEDULES}")

    def step_sizes(self, t: int = 1):
        """(eta, mu) for round ``t`` (1-based)."""
        if self.lr_schedule == "one_over_sqrtT":
            s = 1.0 / math.sqrt(self.rounds)
            return s, s
        if self.lr_schedule == "inv_sqrt_t":
            s = 1.0 / math.sqrt(t)
            return self.eta * s, self.mu * s
        return self.eta, self.mu

    @property
    def effective_batch(self) -> int:
        return self.rounds if self.batch_equals_rounds else self.batch_size


@dataclass
class FederationState:
    W: list
    alpha: np.ndarray
    round: int = 0
    batch_rngs: list = field(default_factory=list, repr=False)
    channel_rngs: list = field(default_factory=list, repr=False)
    losses: np.ndarray | None = field(default=None, repr=False)


@dataclass
class RoundMetrics:
    round: int
    algorithm: str
    train_acc: np.ndarray
    test_acc: np.ndarray
    objective: float
    w_drift: float
    alpha_drift: float
    delta: np.ndarray
    outages: int = 0
    uplink_bits: int = 0

    @property
    def mean_train_acc(self) -> float:
        return float(np.mean(self.train_acc))

    @property
    def mean_test_acc(self) -> float:
        return float(np.mean(self.test_acc))

    @property
    def mean_delta(self) -> float:
        return float(np.mean(self.delta))


class _Shards:
    """Stacked training/test arrays for fast per-device evaluation."""

    def __init__(self, data: FederationData):
        self.data = data
        self.train = [s.batch("train") for s in data.shards]
        self.test = [s.batch("test") if s.test_count else None for s in data.shards]
        sizes = {len(y) for _, y in self.train}
        self.stacked = None
        if len(sizes) == 1:
            self.stacked = (np.stack([x for x, _ in self.train]), np.stack([y for _, y in self.train]))

    def losses_grads(self, w: ModelParams, bound_M: float):
        """Training loss and gradient of model ``w`` on every device."""
        if self.stacked is not None:
            return grouped_loss_grad(w.values, w.layer_dims, w.activation, *self.stacked, bound_M)
        out = [grouped_loss_grad(w.values, w.layer_dims, w.activation, x[None], y[None], bound_M)
               for x, y in self.train]
        return np.array([l[0] for l, _ in out]), np.stack([g[0] for _, g in out])

    def own_accuracy(self, W):
        tr, te = [], []
        for k, w in enumerate(W):
            x, y = self.train[k]
            tr.append(np.mean(predict(w, x) == y))
            if self.test[k] is None:
                te.append(np.nan)
            else:
                x, y = self.test[k]
                te.append(np.mean(predict(w, x) == y))
        return np.array(tr), np.array(te)


def _shard_view(data) -> _Shards:
    view = getattr(data, "_view", None)
    if view is None:
        view = _Shards(data)
        object.__setattr__(data, "_view", view)
    return view


def init_state(data: FederationData, cfg: TrainConfig,
               channel: ChannelConfig = ChannelConfig()) -> FederationState:
    """Common initial model on every device, uniform importance rows."""
    dims = architecture(data.d_in, data.n_classes, cfg.hidden)
    w0 = init_params(dims, cfg.activation, seed=cfg.seed)
    N = data.N
    batch_rngs = [np.random.default_rng(s)
                  for s in np.random.SeedSequence([cfg.seed, 1]).spawn(N)]
    return FederationState(W=[w0] * N, alpha=np.full((N, N), 1.0 / N), round=0,
                           batch_rngs=batch_rngs, channel_rngs=device_streams(channel, N))


def _batch_indices(rng, n_train: int, b: int, force_random: bool = False):
    if b == n_train and not force_random:
        return np.arange(n_train)
    if b < n_train:
        return rng.choice(n_train, size=b, replace=False)
    return rng.integers(n_train, size=b)


def _draw_batches(state, data, cfg):
    view = _shard_view(data)
    b = cfg.effective_batch
    xs, ys = [], []
    for m, (x, y) in enumerate(view.train):
        idx = _batch_indices(state.batch_rngs[m], len(y), b, cfg.batch_equals_rounds)
        xs.append(x[idx])
        ys.append(y[idx])
    return np.stack(xs), np.stack(ys)


def _check_finite(W, round_index):
    for w in W:
        if not np.all(np.isfinite(w.values)):
            raise DivergenceError(round_index)


def _with_values(w: ModelParams, values, round_index) -> ModelParams:
    if not np.all(np.isfinite(values)):
        raise DivergenceError(round_index)
    return w.with_values(values)


def delta_k_diagnostic(k: int, state_before: FederationState, state_after: FederationState,
                       true_grads, alpha_grad, cfg: TrainConfig, pen_cfg: PenaltyConfig,
                       mu: float | None = None) -> float:
    """Convergence diagnostic for device k in one round.

    ``true_grads[m]`` is the full-shard gradient of model k on device m at
    the pre-round weights; ``alpha_grad`` is the gradient of the objective in
    ``alpha[k]`` at the pre-round state.
    """
    d = state_before.W[k].size
    _, beta, _ = lipschitz_constants(k, pen_cfg, d)
    factor = 1.0 - beta / (2.0 * math.sqrt(cfg.rounds))
    if factor < 0:
        warnings.warn("beta / (2 sqrt(T)) > 1: diagnostic may be negative", RuntimeWarning)
    if mu is None:
        mu = cfg.step_sizes()[1]
    l1 = np.abs(np.asarray(true_grads)).sum(axis=1)
    first = pen_cfg.lam[k] ** 2 * float(state_after.alpha[k] @ l1)
    pg = projected_gradient(state_before.alpha[k], alpha_grad, mu)
    return float(first + factor * (pg @ pg))


def mtfeel_round(state: FederationState, data: FederationData, dhat, cfg: TrainConfig,
                 pen_cfg: PenaltyConfig, channel: ChannelConfig = ChannelConfig(),
                 loss: LossSpec = LossSpec()):
    """One communication round of signed-gradient MtFEEL.

    Each device reports sign(grad) of every model on a fresh batch through
    the uplink; the BS takes the signed step on every w_k, then a projected
    step on every alpha_k using training losses at the updated weights.
    """
    N = data.N
    t = state.round + 1
    eta, mu = cfg.step_sizes(t)
    view = _shard_view(data)
    M = loss.bound_M
    X, y = _draw_batches(state, data, cfg)
    full_batch = cfg.effective_batch == X.shape[1] and not cfg.batch_equals_rounds and \
        all(len(yy) == X.shape[1] for _, yy in view.train)

    if state.losses is None:
        state.losses = np.stack([view.losses_grads(w, M)[0] for w in state.W])

    outages = 0
    reports, grads_hat = [], []
    for k, w in enumerate(state.W):
        _, G = grouped_loss_grad(w.values, w.layer_dims, w.activation, X, y, M)
        grads_hat.append(G)
        row = []
        for m in range(N):
            out = transmit(sign_vec(G[m]), channel, state.channel_rngs[m])
            outages += not out.delivered
            row.append(out.signs)
        reports.append(np.stack(row))

    W_new = [_with_values(w, w.values - eta * signed_grad_w(k, state.W, state.alpha, reports[k], pen_cfg), t)
             for k, w in enumerate(state.W)]

    lg_new = [view.losses_grads(w, M) for w in W_new]
    losses_new = np.stack([l for l, _ in lg_new])
    if not np.all(np.isfinite(losses_new)):
        raise DivergenceError(t, "losses")

    alpha_grads = np.stack([grad_alpha_row(k, state.alpha, dhat, losses_new[k], pen_cfg)
                            for k in range(N)])
    alpha_new = np.stack([project_simplex(state.alpha[k] - mu * alpha_grads[k]) for k in range(N)])

    after = FederationState(W_new, alpha_new, t, state.batch_rngs, state.channel_rngs, losses_new)

    delta = np.zeros(N)
    if cfg.diagnostics:
        for k, w in enumerate(state.W):
            true_g = grads_hat[k] if full_batch else view.losses_grads(w, M)[1]
            g_alpha = grad_alpha_row(k, state.alpha, dhat, state.losses[k], pen_cfg)
            delta[k] = delta_k_diagnostic(k, state, after, true_g, g_alpha, cfg, pen_cfg, mu)

    train_acc, test_acc = view.own_accuracy(W_new)
    metrics = RoundMetrics(
        round=t, algorithm="mtfeel", train_acc=train_acc, test_acc=test_acc,
        objective=mtfeel_objective(W_new, alpha_new, dhat, data, pen_cfg, loss, losses=losses_new),
        w_drift=float(np.mean([np.sum((a.values - b.values) ** 2) for a, b in zip(W_new, state.W)])),
        alpha_drift=float(np.mean(np.sum((alpha_new - state.alpha) ** 2, axis=1))),
        delta=delta, outages=outages, uplink_bits=N * N * state.W[0].size,
    )
    return after, metrics


def _sgd(w, x, y, eta, M, t):
    _, g = grouped_loss_grad(w.values, w.layer_dims, w.activation, x[None], y[None], M)
    return _with_values(w, w.values - eta * g[0], t)


def baseline_round(kind: str, state: FederationState, data: FederationData, cfg: TrainConfig,
                   channel: ChannelConfig = ChannelConfig(), loss: LossSpec = LossSpec()):
    """One round of ``local``, ``fedsgd``, ``sign_fedsgd`` or ``fedavg``."""
    N = data.N
    t = state.round + 1
    eta, _ = cfg.step_sizes(t)
    M = loss.bound_M
    view = _shard_view(data)
    weights = data.train_counts / data.train_counts.sum()
    outages, bits = 0, 0

    if kind == "local":
        X, y = _draw_batches(state, data, cfg)
        W_new = [_sgd(w, X[k], y[k], eta, M, t) for k, w in enumerate(state.W)]
    elif kind in ("fedsgd", "sign_fedsgd"):
        X, y = _draw_batches(state, data, cfg)
        w = state.W[0]
        _, G = grouped_loss_grad(w.values, w.layer_dims, w.activation, X, y, M)
        if kind == "sign_fedsgd":
            rows = []
            for m in range(N):
                out = transmit(sign_vec(G[m]), channel, state.channel_rngs[m])
                outages += not out.delivered
                rows.append(out.signs)
            G = np.stack(rows).astype(np.float64)
            bits = N * w.size
        else:
            bits = 32 * N * w.size
        shared = _with_values(w, w.values - eta * (weights @ G), t)
        W_new = [shared] * N
    elif kind == "fedavg":
        w = state.W[0]
        b = cfg.batch_size
        locals_ = []
        for m, (x, yy) in enumerate(view.train):
            wm = w
            rng = state.batch_rngs[m]
            for _ in range(cfg.local_epochs):
                order = rng.permutation(len(yy))
                for s in range(0, len(yy), b):
                    idx = order[s:s + b]
                    wm = _sgd(wm, x[idx], yy[idx], eta, M, t)
            locals_.append(wm.values)
        shared = _with_values(w, weights @ np.stack(locals_), t)
        W_new = [shared] * N
        bits = 32 * N * w.size
    else:
        raise ValueError(f"unknown baseline {kind!r}")

    own = np.array([view.losses_grads(wk, M)[0][k] for k, wk in enumerate(W_new)]) \
        if kind == "local" else view.losses_grads(W_new[0], M)[0]
    if not np.all(np.isfinite(own)):
        raise DivergenceError(t, "losses")
    train_acc, test_acc = view.own_accuracy(W_new)
    metrics = RoundMetrics(
        round=t, algorithm=kind, train_acc=train_acc, test_acc=test_acc,
        objective=float(weights @ own),
        w_drift=float(np.mean([np.sum((a.values - b.values) ** 2) for a, b in zip(W_new, state.W)])),
        alpha_drift=0.0, delta=np.zeros(N), outages=outages, uplink_bits=bits,
    )
    return FederationState(W_new, state.alpha, t, state.batch_rngs, state.channel_rngs), metrics


def mtfeel_train(data: FederationData, dhat, cfg: TrainConfig, pen_cfg: PenaltyConfig | None = None,
                 channel: ChannelConfig = ChannelConfig(), loss: LossSpec = LossSpec(),
                 state: FederationState | None = None, callback=None):
    """Run ``cfg.rounds`` MtFEEL rounds; returns the final state and per-round metrics."""
    if pen_cfg is None:
        pen_cfg = PenaltyConfig.uniform(data.train_counts, bound_M=loss.bound_M)
    state = state or init_state(data, cfg, channel)
    history = []
    for _ in range(cfg.rounds):
        state, m = mtfeel_round(state, data, dhat, cfg, pen_cfg, channel, loss)
        history.append(m)
        if callback:
            callback(state, m)
    return state, history


def baseline_train(kind: str, data: FederationData, cfg: TrainConfig,
                   channel: ChannelConfig = ChannelConfig(), loss: LossSpec = LossSpec(),
                   state: FederationState | None = None, callback=None):
    state = state or init_state(data, cfg, channel)
    history = []
    for _ in range(cfg.rounds):
        state, m = baseline_round(kind, state, data, cfg, channel, loss)
        history.append(m)
        if callback:
            callback(state, m)
    return state, history


def train(algorithm: str, data: FederationData, cfg: TrainConfig, dhat=None,
          pen_cfg: PenaltyConfig | None = None, channel: ChannelConfig = ChannelConfig(),
          loss: LossSpec = LossSpec()):
    if algorithm == "mtfeel":
        if dhat is None:
            raise ValueError("mtfeel needs a discrepancy matrix")
        return mtfeel_train(data, dhat, cfg, pen_cfg, channel, loss)
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    return baseline_train(algorithm, data, cfg, channel, loss)


def cross_cohort_mass(alpha, data: FederationData) -> float:
    """Largest total importance a device puts on devices outside its cohort."""
    alpha = np.asarray(alpha)
    return float(np.max(np.sum(np.where(data.same_cohort(), 0.0, alpha), axis=1)))


def quarter_means(values):
    """(first-quarter mean, last-quarter mean) of a per-round series."""
    v = np.asarray(values, dtype=np.float64)
    q = max(len(v) // 4, 1)
    return float(v[:q].mean()), float(v[-q:].mean())
