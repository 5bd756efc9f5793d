"""Composite training objective, optimizer, and the training loop.

Five loss terms, each restricted to the available models of a trace:

  dist  - heteroscedastic Gaussian NLL of observed quality
  pair  - logistic pairwise ranking over observed utilities
  list  - cross entropy between softened utility and score distributions
  util  - direct utility regression
  res   - squared-correction regularizer

Total = dist + alpha*pair + beta*list + gamma*util + eta*res. Training is
deterministic per (seed, data, config); epoch-level validation selects the
returned parameters.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .domain import ModelPool, RoutingTrace, UtilitySpec, compute_utility, descriptor_matrix
from .network import ForwardRecord, RouterConfig, RouterParams, forward_from_arrays
from .tensor import Tape, Tensor, backward


class TrainingError(Exception):
    """Training aborted: non-finite loss or gradients."""


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 1.0
    eta_res: float = 0.01
    tau_list: float = 0.1

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma, self.eta_res) < 0 or self.tau_list <= 0:
            raise ValueError("loss weights must be >= 0 and tau_list > 0")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    gradient_clip: float = 1.0
    selection_metric: str = "validation_utility"  # or "validation_nauc"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 1:
            raise ValueError("learning_rate > 0 and epochs >= 1 required")
        if self.selection_metric not in ("validation_utility", "validation_nauc"):
            raise ValueError(f"unknown selection metric {self.selection_metric!r}")


def loss_dist(mu: Tensor, sigma: Tensor, y: np.ndarray, omega: np.ndarray) -> Tensor:
    """Sum over available i of (y_i-mu_i)^2 / (2 sigma_i^2) + log sigma_i."""
    avail = np.flatnonzero(omega)
    mu_a = T.gather(mu, avail)
    sg_a = T.gather(sigma, avail)
    resid = T.square(T.sub(mu_a, Tensor(y[avail])))
    quad = T.div(resid, T.mul(T.square(sg_a), 2.0))
    return T.add(T.sum_all(quad), T.sum_all(T.log(sg_a)))


def loss_pair(scores: Tensor, u: np.ndarray, omega: np.ndarray) -> Tensor:
    """Logistic loss on every available ordered pair with u_i > u_j (strict)."""
    both = omega[:, None] & omega[None, :]
    idx_i, idx_j = np.nonzero(both & (u[:, None] > u[None, :]))
    if len(idx_i) == 0:
        return Tensor(np.zeros(()))
    diff = T.sub(T.gather(scores, idx_i), T.gather(scores, idx_j))
    return T.sum_all(T.softplus(T.neg(diff)))


def loss_list(scores: Tensor, u: np.ndarray, omega: np.ndarray, tau_list: float) -> Tensor:
    """CE(softmax(u/tau), softmax(s/tau)) over available models."""
    avail = np.flatnonzero(omega)
    z = u[avail] / tau_list
    z = np.exp(z - z.max())
    p = z / z.sum()
    q = T.masked_softmax(T.mul(scores, 1.0 / tau_list), omega)
    logq = T.log(T.gather(q, avail))
    return T.neg(T.sum_all(T.mul(Tensor(p), logq)))


def loss_util(scores: Tensor, u: np.ndarray, omega: np.ndarray) -> Tensor:
    avail = np.flatnonzero(omega)
    return T.sum_all(T.square(T.sub(T.gather(scores, avail), Tensor(u[avail]))))


def loss_res(delta: Tensor, omega: np.ndarray) -> Tensor:
    avail = np.flatnonzero(omega)
    return T.sum_all(T.square(T.gather(delta, avail)))


@dataclass
class LossTerms:
    dist: float
    pair: float
    list_: float
    util: float
    res: float
    total: float


def total_loss(
    record: ForwardRecord,
    trace: RoutingTrace,
    costs: np.ndarray,
    weights: LossWeights,
    lam_train: float,
    distributional: bool = True,
) -> tuple[Tensor, LossTerms]:
    """Weighted sum of the five terms; utilities use observed y under lam_train.

    With the distributional head ablated the NLL term is dropped (the
    scalar head trains against utility regression instead).
    """
    omega = trace.omega
    y = trace.y
    u = np.where(omega, y - lam_train * costs, 0.0)
    l_pair = loss_pair(record.scores, u, omega)
    l_list = loss_list(record.scores, u, omega, weights.tau_list)
    l_util = loss_util(record.scores, u, omega)
    l_res = loss_res(record.delta, omega)
    total = T.add(
        T.add(T.mul(l_pair, weights.alpha), T.mul(l_list, weights.beta)),
        T.add(T.mul(l_util, weights.gamma), T.mul(l_res, weights.eta_res)),
    )
    if distributional:
        l_dist = loss_dist(record.mu, record.sigma, y, omega)
        total = T.add(l_dist, total)
        dist_val = l_dist.item()
    else:
        dist_val = 0.0
    terms = LossTerms(
        dist=dist_val,
        pair=l_pair.item(),
        list_=l_list.item(),
        util=l_util.item(),
        res=l_res.item(),
        total=total.item(),
    )
    return total, terms


class AdamState:
    """Adaptive moment estimation with bias correction and global-norm clipping."""

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, params: RouterParams):
        self.m = {k: np.zeros_like(t.data) for k, t in params.blocks.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.blocks.items()}
        self.t = 0


def optimizer_step(
    params: RouterParams, state: AdamState, learning_rate: float, gradient_clip: float
) -> None:
    """One Adam update from the accumulated .grad buffers (then cleared)."""
    grads: dict[str, np.ndarray] = {}
    sq_norm = 0.0
    for name, tens in params.blocks.items():
        g = tens.grad
        if g is None:
            g = np.zeros_like(tens.data)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter block {name!r}")
        grads[name] = g
        sq_norm += float(np.sum(g * g))
    norm = np.sqrt(sq_norm)
    if gradient_clip > 0 and norm > gradient_clip:
        scale = gradient_clip / norm
        # grads may alias backward buffers; never scale them in place
        grads = {name: g * scale for name, g in grads.items()}
    state.t += 1
    b1c = 1.0 - AdamState.BETA1**state.t
    b2c = 1.0 - AdamState.BETA2**state.t
    for name, tens in params.blocks.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= AdamState.BETA1
        m += (1 - AdamState.BETA1) * g
        v *= AdamState.BETA2
        v += (1 - AdamState.BETA2) * g * g
        tens.data -= learning_rate * (m / b1c) / (np.sqrt(v / b2c) + AdamState.EPS)
        tens.zero_grad()


@dataclass
class EpochRow:
    epoch: int
    dist: float | None
    pair: float | None
    list_: float | None
    util: float | None
    res: float | None
    total: float | None
    val_metric: float


@dataclass
class TrainReport:
    rows: list[EpochRow] = field(default_factory=list)
    best_epoch: int = 0

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "L_dist", "L_pair", "L_list", "L_util", "L_res", "L_total", "val_metric"])
            for r in self.rows:
                vals = [r.dist, r.pair, r.list_, r.util, r.res, r.total]
                w.writerow([r.epoch] + [("" if v is None else repr(v)) for v in vals] + [repr(r.val_metric)])


def _validation_utility(
    params: RouterParams,
    cfg: RouterConfig,
    traces: Sequence[RoutingTrace],
    descriptors: np.ndarray,
    costs: np.ndarray,
    lam: float,
) -> float:
    """Mean observed utility of the chosen model over the validation split."""
    spec = UtilitySpec(lam)
    total = 0.0
    for tr in traces:
        rec = forward_from_arrays(tr.query, descriptors, costs, tr.omega, params, cfg, lam)
        total += compute_utility(float(tr.y[rec.chosen]), float(costs[rec.chosen]), spec)
    return total / len(traces)


def _validation_metric(
    metric: str,
    params: RouterParams,
    cfg: RouterConfig,
    traces: Sequence[RoutingTrace],
    pool: ModelPool,
    descriptors: np.ndarray,
    costs: np.ndarray,
    lam: float,
) -> float:
    if metric == "validation_utility":
        return _validation_utility(params, cfg, traces, descriptors, costs, lam)
    # validation_nauc: frontier vs the oracle on the validation split
    from .evaluation import (  # deferred: evaluation depends on this module
        LatentRouterPolicy,
        OraclePolicy,
        cost_quality_frontier,
        nauc,
    )

    grid = np.concatenate([[0.0], np.geomspace(0.01, 2.0, 9)[1:]])
    policy = LatentRouterPolicy(params, cfg, pool)
    oracle = OraclePolicy(traces, pool)
    pts = cost_quality_frontier(policy, traces, pool, grid)
    oracle_pts = cost_quality_frontier(oracle, traces, pool, grid)
    return nauc(pts, oracle_pts)


def train(
    train_traces: Sequence[RoutingTrace],
    val_traces: Sequence[RoutingTrace],
    pool: ModelPool,
    router_cfg: RouterConfig,
    train_cfg: TrainConfig,
    weights: LossWeights,
    lam_train: float = 0.0,
) -> tuple[RouterParams, TrainReport]:
    """Seeded mini-batch training with validation-based parameter selection.

    Returns the parameters from the trained epoch with the best validation
    metric (earliest epoch wins ties) plus the per-epoch report. Row 0 of
    the report holds the pre-training validation metric with empty loss
    cells; it is logged but never selected.
    """
    descriptors = descriptor_matrix(pool)
    costs = pool.costs()
    params = RouterParams.initialize(router_cfg, seed=train_cfg.seed)
    state = AdamState(params)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 0xB41C]))

    report = TrainReport()
    val0 = _validation_metric(
        train_cfg.selection_metric, params, router_cfg, val_traces, pool, descriptors, costs, lam_train
    )
    report.rows.append(EpochRow(0, None, None, None, None, None, None, val0))
    best_val = -np.inf
    best_params = params.copy()
    best_epoch = 0

    n = len(train_traces)
    order = np.arange(n)
    for epoch in range(1, train_cfg.epochs + 1):
        shuffle_rng.shuffle(order)
        sums = np.zeros(6)
        for start in range(0, n, train_cfg.batch_size):
            batch = order[start : start + train_cfg.batch_size]
            for idx in batch:
                tr = train_traces[idx]
                with Tape() as tape:
                    rec = forward_from_arrays(
                        tr.query, descriptors, costs, tr.omega, params, router_cfg, lam_train
                    )
                    loss, terms = total_loss(
                        rec, tr, costs, weights, lam_train,
                        distributional=router_cfg.distributional_head,
                    )
                    if not np.isfinite(terms.total):
                        raise TrainingError(
                            f"non-finite loss at epoch {epoch}, trace {tr.query.query_id!r}"
                        )
                    backward(tape, loss)
                sums += [terms.dist, terms.pair, terms.list_, terms.util, terms.res, terms.total]
            optimizer_step(params, state, train_cfg.learning_rate, train_cfg.gradient_clip)
        means = sums / n
        val = _validation_metric(
            train_cfg.selection_metric, params, router_cfg, val_traces, pool, descriptors, costs, lam_train
        )
        report.rows.append(EpochRow(epoch, *means.tolist(), val))
        if val > best_val:
            best_val = val
            best_params = params.copy()
            best_epoch = epoch
    report.best_epoch = best_epoch
    return best_params, report
