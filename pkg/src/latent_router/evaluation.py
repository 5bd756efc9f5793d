"""Baseline routers, ablation variants, and the full metric harness.

Every policy implements ``decide(query, omega, lam) -> Decision`` and never
sees the outcome vector of the trace being routed; the oracle is the single
deliberate exception (it carries a label table and is flagged
``reads_labels``). Metrics cover selected quality, oracle regret,
cost-quality frontiers with an oracle-normalized trapezoidal nAUC,
outcome-prediction quality (MSE/NDCG/Spearman/Top-3 recall), pool-change
scenarios, cold-start insertion, Welch significance tests, and router
latency.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .domain import (
    ModelDescriptor,
    ModelPool,
    MultimodalQuery,
    RoutingTrace,
    build_capability_profile,
    descriptor_matrix,
    neutral_profile,
)
from .network import RouterConfig, RouterParams, forward_from_arrays
from .tensor import Tape, Tensor, backward
from .training import AdamState, LossWeights, TrainConfig, optimizer_step, train


@dataclass
class Decision:
    chosen: int
    scores: np.ndarray | None = None  # per-model quality estimates, when available


class RouterPolicy:
    """Uniform routing interface; subclasses must keep decide() label-blind."""

    name: str = "policy"
    reads_labels: bool = False
    stateless: bool = True  # stateful policies (seeded RNG) run single-threaded

    def decide(self, query: MultimodalQuery, omega: np.ndarray, lam: float) -> Decision:
        raise NotImplementedError


def decide_all(
    policy: RouterPolicy,
    traces: Sequence[RoutingTrace],
    lam: float,
    workers: int = 1,
) -> list[Decision]:
    """Decisions for every trace, reduced in canonical trace order.

    With workers > 1 stateless policies run on a thread pool; results are
    collected in input order, so the output is identical either way.
    """
    if workers > 1 and policy.stateless:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(lambda t: policy.decide(t.query, t.omega, lam), traces))
    return [policy.decide(t.query, t.omega, lam) for t in traces]


def _argmax_available(values: np.ndarray, costs: np.ndarray, omega: np.ndarray) -> int:
    chosen = -1
    for i in np.flatnonzero(omega):
        if chosen < 0 or values[i] > values[chosen] or (
            values[i] == values[chosen] and costs[i] < costs[chosen]
        ):
            chosen = int(i)
    return chosen


def pooled_features(query: MultimodalQuery) -> np.ndarray:
    """Mean-pooled image tokens concatenated with mean-pooled question tokens."""
    return np.concatenate([query.image_tokens.mean(axis=0), query.question_tokens.mean(axis=0)])


class LatentRouterPolicy(RouterPolicy):
    """The trained router; scores are corrected per-model quality estimates."""

    def __init__(self, params: RouterParams, cfg: RouterConfig, pool: ModelPool, name: str = "latent_router"):
        self.params = params
        self.cfg = cfg
        self.pool = pool
        self.name = name
        self._descriptors = descriptor_matrix(pool)
        self._costs = pool.costs()

    def decide(self, query, omega, lam):
        rec = forward_from_arrays(
            query, self._descriptors, self._costs, omega, self.params, self.cfg, lam
        )
        return Decision(chosen=rec.chosen, scores=rec.mu_tilde.data.copy())


class OraclePolicy(RouterPolicy):
    """Upper bound only: picks the argmax observed utility. Reads labels by design."""

    name = "oracle"
    reads_labels = True

    def __init__(self, traces: Sequence[RoutingTrace], pool: ModelPool):
        self._labels = {t.query.query_id: t.y for t in traces}
        self._costs = pool.costs()

    def decide(self, query, omega, lam):
        y = self._labels[query.query_id]
        u = np.where(omega, y - lam * self._costs, -np.inf)
        return Decision(chosen=_argmax_available(u, self._costs, omega))


class StrongestPolicy(RouterPolicy):
    """Fixed model with the best mean calibration utility; falls back down its own ranking."""

    name = "strongest"

    def __init__(self, calib: Sequence[RoutingTrace], pool: ModelPool):
        self._calib = calib
        self._costs = pool.costs()
        self._k = pool.size
        self._ranking_cache: dict[float, np.ndarray] = {}

    def _ranking(self, lam: float) -> np.ndarray:
        if lam not in self._ranking_cache:
            sums = np.zeros(self._k)
            counts = np.zeros(self._k)
            for t in self._calib:
                for i in np.flatnonzero(t.omega):
                    sums[i] += t.y[i] - lam * self._costs[i]
                    counts[i] += 1
            means = np.where(counts > 0, sums / np.maximum(counts, 1), -np.inf)
            self._ranking_cache[lam] = np.argsort(-means, kind="stable")
        return self._ranking_cache[lam]

    def decide(self, query, omega, lam):
        for i in self._ranking(lam):
            if omega[i]:
                return Decision(chosen=int(i))
        raise ValueError("no available model")


class CheapestPolicy(RouterPolicy):
    name = "cheapest"

    def __init__(self, pool: ModelPool):
        self._costs = pool.costs()

    def decide(self, query, omega, lam):
        avail = np.flatnonzero(omega)
        return Decision(chosen=int(avail[np.argmin(self._costs[avail])]))


class RandomPolicy(RouterPolicy):
    """Seeded uniform choice over available models; consumed in evaluation order."""

    name = "random"
    stateless = False

    def __init__(self, seed: int):
        self._rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA11D]))

    def decide(self, query, omega, lam):
        return Decision(chosen=int(self._rng.choice(np.flatnonzero(omega))))


class KnnPolicy(RouterPolicy):
    """Per-model quality = mean over the k nearest calibration queries (k=16)."""

    name = "knn"

    def __init__(self, calib: Sequence[RoutingTrace], pool: ModelPool, k: int = 16):
        self.k = k
        self._costs = pool.costs()
        self._feats = np.stack([pooled_features(t.query) for t in calib])
        self._y = np.stack([t.y for t in calib])  # NaN where unavailable
        with np.errstate(invalid="ignore"):
            self._global_means = np.nanmean(self._y, axis=0)

    def predict_quality(self, query: MultimodalQuery) -> np.ndarray:
        f = pooled_features(query)
        d2 = np.sum((self._feats - f) ** 2, axis=1)
        nearest = np.argsort(d2, kind="stable")[: self.k]
        neigh = self._y[nearest]
        with np.errstate(invalid="ignore"):
            q = np.nanmean(neigh, axis=0)
        return np.where(np.isnan(q), self._global_means, q)

    def decide(self, query, omega, lam):
        q = self.predict_quality(query)
        u = np.where(omega, q - lam * self._costs, -np.inf)
        return Decision(chosen=_argmax_available(u, self._costs, omega), scores=q)


class AdditivePolicy(RouterPolicy):
    """Trained additive scorer s(x, m) = g(x) + h(m); see also its impossibility test.

    g is a small MLP on pooled query features, h a per-model scalar. The
    pairwise ordering of any two models is therefore identical for every
    query.
    """

    name = "additive"

    def __init__(self, calib: Sequence[RoutingTrace], pool: ModelPool, seed: int,
                 epochs: int = 30, lr: float = 3e-3, hidden: int = 32):
        self._costs = pool.costs()
        k = pool.size
        feat_dim = pooled_features(calib[0].query).shape[0]
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xADD]))
        bound1 = 1.0 / np.sqrt(feat_dim)
        bound2 = 1.0 / np.sqrt(hidden)
        self.params = RouterParams({
            "g_w1": Tensor(rng.uniform(-bound1, bound1, (feat_dim, hidden)), requires_grad=True),
            "g_b1": Tensor(np.zeros(hidden), requires_grad=True),
            "g_w2": Tensor(rng.uniform(-bound2, bound2, (hidden, 1)), requires_grad=True),
            "g_b2": Tensor(np.zeros(1), requires_grad=True),
            "h": Tensor(np.zeros(k), requires_grad=True),
        })
        state = AdamState(self.params)
        feats = np.stack([pooled_features(t.query) for t in calib])
        order = np.arange(len(calib))
        shuffle = np.random.default_rng(np.random.SeedSequence([seed, 0xADD, 1]))
        for _ in range(epochs):
            shuffle.shuffle(order)
            for start in range(0, len(order), 64):
                batch = order[start : start + 64]
                with Tape() as tape:
                    parts = []
                    for idx in batch:
                        t = calib[idx]
                        avail = np.flatnonzero(t.omega)
                        gx = self._g(feats[idx])
                        s = T.add(gx, T.gather(self.params["h"], avail))
                        parts.append(T.sum_all(T.square(T.sub(s, Tensor(t.y[avail])))))
                    loss = parts[0]
                    for p_ in parts[1:]:
                        loss = T.add(loss, p_)
                    backward(tape, loss)
                optimizer_step(self.params, state, lr, 1.0)

    def _g(self, feat: np.ndarray) -> Tensor:
        x = Tensor(feat[None, :])
        hidden = T.tanh(T.affine(x, self.params["g_w1"], self.params["g_b1"]))
        return T.reshape(T.affine(hidden, self.params["g_w2"], self.params["g_b2"]), (1,))

    def predict_quality(self, query: MultimodalQuery) -> np.ndarray:
        gx = self._g(pooled_features(query)).data[0]
        return gx + self.params["h"].data

    def decide(self, query, omega, lam):
        q = self.predict_quality(query)
        u = np.where(omega, q - lam * self._costs, -np.inf)
        return Decision(chosen=_argmax_available(u, self._costs, omega), scores=q)


class DirectClassifierPolicy(RouterPolicy):
    """Softmax over the pool trained on best-model labels; scores are probabilities."""

    name = "direct_classifier"

    def __init__(self, calib: Sequence[RoutingTrace], pool: ModelPool, seed: int,
                 lam_train: float = 0.0, epochs: int = 30, lr: float = 3e-3, hidden: int = 32):
        self._costs = pool.costs()
        k = pool.size
        feat_dim = pooled_features(calib[0].query).shape[0]
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD14C]))
        b1 = 1.0 / np.sqrt(feat_dim)
        b2 = 1.0 / np.sqrt(hidden)
        self.params = RouterParams({
            "w1": Tensor(rng.uniform(-b1, b1, (feat_dim, hidden)), requires_grad=True),
            "b1": Tensor(np.zeros(hidden), requires_grad=True),
            "w2": Tensor(rng.uniform(-b2, b2, (hidden, k)), requires_grad=True),
            "b2": Tensor(np.zeros(k), requires_grad=True),
        })
        state = AdamState(self.params)
        feats = np.stack([pooled_features(t.query) for t in calib])
        labels = []
        for t in calib:
            u = np.where(t.omega, t.y - lam_train * self._costs, -np.inf)
            labels.append(_argmax_available(u, self._costs, t.omega))
        order = np.arange(len(calib))
        shuffle = np.random.default_rng(np.random.SeedSequence([seed, 0xD14C, 1]))
        for _ in range(epochs):
            shuffle.shuffle(order)
            for start in range(0, len(order), 64):
                batch = order[start : start + 64]
                with Tape() as tape:
                    parts = []
                    for idx in batch:
                        t = calib[idx]
                        probs = self._probs(feats[idx], t.omega)
                        parts.append(T.neg(T.log(T.gather(probs, [labels[idx]]))))
                    loss = T.sum_all(T.concat(parts))
                    backward(tape, loss)
                optimizer_step(self.params, state, lr, 1.0)

    def _probs(self, feat: np.ndarray, omega: np.ndarray) -> Tensor:
        x = Tensor(feat[None, :])
        hidden = T.tanh(T.affine(x, self.params["w1"], self.params["b1"]))
        logits = T.reshape(T.affine(hidden, self.params["w2"], self.params["b2"]), (omega.shape[0],))
        return T.masked_softmax(logits, omega)

    def decide(self, query, omega, lam):
        p = self._probs(pooled_features(query), omega).data
        return Decision(chosen=_argmax_available(p, self._costs, omega), scores=p.copy())


BASELINE_KINDS = (
    "oracle",
    "strongest",
    "cheapest",
    "random",
    "knn",
    "additive",
    "no_comm",
    "point_score",
    "direct_classifier",
)


def make_baseline(
    kind: str,
    pool: ModelPool,
    calib_traces: Sequence[RoutingTrace],
    val_traces: Sequence[RoutingTrace] | None = None,
    test_traces: Sequence[RoutingTrace] | None = None,
    seed: int = 0,
    router_cfg: RouterConfig | None = None,
    train_cfg: TrainConfig | None = None,
    loss_weights: LossWeights | None = None,
    lam_train: float = 0.0,
) -> RouterPolicy:
    """Construct a baseline policy, training it on calibration data when needed."""
    if kind == "oracle":
        all_tr = list(calib_traces) + list(val_traces or []) + list(test_traces or [])
        return OraclePolicy(all_tr, pool)
    if kind == "strongest":
        return StrongestPolicy(val_traces if val_traces else calib_traces, pool)
    if kind == "cheapest":
        return CheapestPolicy(pool)
    if kind == "random":
        return RandomPolicy(seed)
    if kind == "knn":
        return KnnPolicy(calib_traces, pool)
    if kind == "additive":
        return AdditivePolicy(calib_traces, pool, seed)
    if kind == "direct_classifier":
        return DirectClassifierPolicy(calib_traces, pool, seed, lam_train=lam_train)
    if kind in ("no_comm", "point_score"):
        if router_cfg is None or train_cfg is None or val_traces is None:
            raise ValueError(f"{kind} needs router_cfg, train_cfg and val_traces")
        weights = loss_weights or LossWeights()
        if kind == "no_comm":
            cfg = RouterConfig(**{**_cfg_dict(router_cfg), "comm_layers": 0})
        else:
            cfg = RouterConfig(**{**_cfg_dict(router_cfg), "distributional_head": False})
            weights = LossWeights(alpha=0.0, beta=0.0, gamma=1.0, eta_res=0.0, tau_list=weights.tau_list)
        params, _ = train(calib_traces, val_traces, pool, cfg, train_cfg, weights, lam_train)
        return LatentRouterPolicy(params, cfg, pool, name=kind)
    raise ValueError(f"unknown baseline kind {kind!r}")


def _cfg_dict(cfg: RouterConfig) -> dict:
    from dataclasses import asdict

    return asdict(cfg)


@dataclass
class PolicyEvaluation:
    policy: str
    lam: float
    selected_quality: float
    oracle_regret: float
    per_slice_quality: dict[str, float]
    n_traces: int


def evaluate_policy(
    policy: RouterPolicy,
    traces: Sequence[RoutingTrace],
    pool: ModelPool,
    lam: float = 0.0,
    workers: int = 1,
) -> PolicyEvaluation:
    """Mean selected quality and oracle regret (observed utilities) over traces."""
    if not traces:
        raise ValueError("evaluate_policy needs at least one trace")
    costs = pool.costs()
    qualities = []
    regrets = []
    slice_sums: dict[str, list[float]] = {}
    for t, d in zip(traces, decide_all(policy, traces, lam, workers)):
        if not t.omega[d.chosen]:
            raise ValueError(f"policy {policy.name} chose an unavailable model")
        y_c = float(t.y[d.chosen])
        u = np.where(t.omega, t.y - lam * costs, -np.inf)
        regrets.append(float(u.max() - (y_c - lam * costs[d.chosen])))
        qualities.append(y_c)
        sl = t.query.slice_label or "all"
        slice_sums.setdefault(sl, []).append(y_c)
    return PolicyEvaluation(
        policy=policy.name,
        lam=lam,
        selected_quality=float(np.mean(qualities)),
        oracle_regret=float(np.mean(regrets)),
        per_slice_quality={k: float(np.mean(v)) for k, v in sorted(slice_sums.items())},
        n_traces=len(traces),
    )


@dataclass(frozen=True)
class FrontierPoint:
    lam: float
    avg_cost: float
    avg_quality: float


def default_lambda_grid() -> np.ndarray:
    """[0] plus 16 log-spaced points in (0.01, 2]."""
    return np.concatenate([[0.0], np.geomspace(0.01, 2.0, 17)[1:]])


def cost_quality_frontier(
    policy: RouterPolicy,
    traces: Sequence[RoutingTrace],
    pool: ModelPool,
    lam_grid: Sequence[float] | None = None,
    workers: int = 1,
) -> list[FrontierPoint]:
    costs = pool.costs()
    grid = default_lambda_grid() if lam_grid is None else np.asarray(lam_grid, dtype=float)
    points = []
    for lam in grid:
        decisions = decide_all(policy, traces, float(lam), workers)
        qs = [float(t.y[d.chosen]) for t, d in zip(traces, decisions)]
        cs = [float(costs[d.chosen]) for d in decisions]
        points.append(FrontierPoint(float(lam), float(np.mean(cs)), float(np.mean(qs))))
    return sorted(points, key=lambda p: (p.avg_cost, p.avg_quality))


def _pareto(points: Sequence[FrontierPoint]) -> list[FrontierPoint]:
    kept = []
    for p in points:
        dominated = any(
            (q.avg_cost <= p.avg_cost and q.avg_quality > p.avg_quality)
            or (q.avg_cost < p.avg_cost and q.avg_quality >= p.avg_quality)
            for q in points
        )
        if not dominated:
            kept.append(p)
    return sorted(kept, key=lambda p: p.avg_cost)


def _frontier_area(points: Sequence[FrontierPoint], lo: float, hi: float) -> float:
    """Trapezoidal area of the Pareto frontier extended flat to [lo, hi]."""
    par = _pareto(points)
    xs = [p.avg_cost for p in par]
    ys = [p.avg_quality for p in par]
    xs = [lo] + xs + [hi]
    ys = [ys[0]] + ys + [ys[-1]]
    area = 0.0
    for i in range(len(xs) - 1):
        area += 0.5 * (ys[i] + ys[i + 1]) * (xs[i + 1] - xs[i])
    return area


def nauc(points: Sequence[FrontierPoint], oracle_points: Sequence[FrontierPoint]) -> float:
    """Area under the quality-cost frontier, normalized by the oracle's area.

    Both frontiers are restricted to Pareto-nondominated points and
    extended flat over the common cost interval. A zero-width interval
    degenerates to the ratio of flat qualities.
    """
    if not points or not oracle_points:
        raise ValueError("nauc needs non-empty frontiers")
    lo = min(min(p.avg_cost for p in points), min(p.avg_cost for p in oracle_points))
    hi = max(max(p.avg_cost for p in points), max(p.avg_cost for p in oracle_points))
    if hi == lo:
        return _pareto(points)[-1].avg_quality / _pareto(oracle_points)[-1].avg_quality
    return _frontier_area(points, lo, hi) / _frontier_area(oracle_points, lo, hi)


def _ranks_average_ties(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=float)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


@dataclass
class RankingMetrics:
    mse: float
    ndcg: float
    spearman: float
    top3_recall: float
    spearman_skipped: int


def ranking_metrics(
    score_rows: Sequence[np.ndarray],
    traces: Sequence[RoutingTrace],
) -> RankingMetrics:
    """Outcome-prediction metrics over available models, averaged across traces.

    NDCG uses raw y gains with a log2 discount; Spearman uses average-rank
    ties and skips single-model traces; Top-3 recall normalizes by
    min(3, available count).
    """
    mses, ndcgs, rhos, top3s = [], [], [], []
    skipped = 0
    for scores, t in zip(score_rows, traces):
        avail = np.flatnonzero(t.omega)
        s = np.asarray(scores, dtype=float)[avail]
        y = t.y[avail]
        mses.append(float(np.mean((s - y) ** 2)))
        by_score = avail[np.argsort(-s, kind="stable")]
        by_y = avail[np.argsort(-y, kind="stable")]
        full_y = t.y
        dcg = sum(full_y[m] / math.log2(r + 2) for r, m in enumerate(by_score))
        idcg = sum(full_y[m] / math.log2(r + 2) for r, m in enumerate(by_y))
        ndcgs.append(dcg / idcg if idcg > 0 else 1.0)
        if len(avail) >= 2:
            rs = _ranks_average_ties(s)
            ry = _ranks_average_ties(y)
            rs_c = rs - rs.mean()
            ry_c = ry - ry.mean()
            denom = np.sqrt((rs_c**2).sum() * (ry_c**2).sum())
            rhos.append(float((rs_c * ry_c).sum() / denom) if denom > 0 else 0.0)
        else:
            skipped += 1
        m = min(3, len(avail))
        top3s.append(len(set(by_score[:m]) & set(by_y[:m])) / m)
    return RankingMetrics(
        mse=float(np.mean(mses)),
        ndcg=float(np.mean(ndcgs)),
        spearman=float(np.mean(rhos)) if rhos else float("nan"),
        top3_recall=float(np.mean(top3s)),
        spearman_skipped=skipped,
    )


def collect_scores(
    policy: RouterPolicy, traces: Sequence[RoutingTrace], lam: float = 0.0, workers: int = 1
) -> list[np.ndarray]:
    rows = []
    for d in decide_all(policy, traces, lam, workers):
        if d.scores is None:
            raise ValueError(f"policy {policy.name} does not expose per-model scores")
        rows.append(d.scores)
    return rows


POOL_SCENARIOS = (
    "full",
    "remove_strongest",
    "remove_cheapest",
    "remove_random_30pct",
    "leave_one_out",
    "single_model",
)


@dataclass
class ScenarioResult:
    scenario: str
    evaluation: PolicyEvaluation
    skipped_traces: int


def _strongest_index(calib: Sequence[RoutingTrace], pool: ModelPool, lam: float) -> int:
    sums = np.zeros(pool.size)
    counts = np.zeros(pool.size)
    costs = pool.costs()
    for t in calib:
        for i in np.flatnonzero(t.omega):
            sums[i] += t.y[i] - lam * costs[i]
            counts[i] += 1
    means = np.where(counts > 0, sums / np.maximum(counts, 1), -np.inf)
    return int(np.argmax(means))


def _eval_with_mask(
    policy: RouterPolicy,
    traces: Sequence[RoutingTrace],
    pool: ModelPool,
    lam: float,
    keep: np.ndarray,
    scenario: str,
) -> ScenarioResult:
    kept_traces = []
    skipped = 0
    for t in traces:
        omega = t.omega & keep
        if not omega.any():
            skipped += 1
            continue
        kept_traces.append(RoutingTrace(query=t.query, omega=omega, y=np.where(omega, t.y, np.nan)))
    ev = evaluate_policy(policy, kept_traces, pool, lam)
    return ScenarioResult(scenario=scenario, evaluation=ev, skipped_traces=skipped)


def pool_change_eval(
    policy: RouterPolicy,
    traces: Sequence[RoutingTrace],
    pool: ModelPool,
    scenario: str,
    lam: float = 0.0,
    calib: Sequence[RoutingTrace] | None = None,
    seed: int = 0,
) -> ScenarioResult:
    """Evaluate a trained policy under a changed candidate pool, no retraining.

    The scenario mask intersects each trace's own availability; traces left
    with no available model are skipped and counted.
    """
    k = pool.size
    if scenario == "full":
        keep = np.ones(k, dtype=bool)
    elif scenario == "remove_strongest":
        keep = np.ones(k, dtype=bool)
        keep[_strongest_index(calib or traces, pool, lam)] = False
    elif scenario == "remove_cheapest":
        keep = np.ones(k, dtype=bool)
        keep[int(np.argmin(pool.costs()))] = False
    elif scenario == "remove_random_30pct":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x30C7]))
        keep = np.ones(k, dtype=bool)
        drop = rng.choice(k, size=max(1, int(round(0.3 * k))), replace=False)
        keep[drop] = False
    elif scenario == "leave_one_out":
        results = []
        skipped = 0
        for held in range(k):
            keep = np.ones(k, dtype=bool)
            keep[held] = False
            r = _eval_with_mask(policy, traces, pool, lam, keep, scenario)
            results.append(r.evaluation)
            skipped += r.skipped_traces
        mean_eval = PolicyEvaluation(
            policy=policy.name,
            lam=lam,
            selected_quality=float(np.mean([e.selected_quality for e in results])),
            oracle_regret=float(np.mean([e.oracle_regret for e in results])),
            per_slice_quality={},
            n_traces=int(np.mean([e.n_traces for e in results])),
        )
        return ScenarioResult(scenario=scenario, evaluation=mean_eval, skipped_traces=skipped)
    elif scenario == "single_model":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x51F6]))
        keep = np.zeros(k, dtype=bool)
        keep[int(rng.integers(k))] = True
    else:
        raise ValueError(f"unknown scenario {scenario!r}")
    return _eval_with_mask(policy, traces, pool, lam, keep, scenario)


def cold_start_eval(
    train_traces: Sequence[RoutingTrace],
    val_traces: Sequence[RoutingTrace],
    test_traces: Sequence[RoutingTrace],
    pool: ModelPool,
    held_out: str,
    slice_names: Sequence[str],
    router_cfg: RouterConfig,
    train_cfg: TrainConfig,
    weights: LossWeights,
    calibration_sizes: Sequence[int | str] = (0, 16, 64, 128, "full"),
    lam: float = 0.0,
) -> list[tuple[int | str, float]]:
    """Hold one model out of training; re-insert with a k-example profile at test.

    Returns (calibration size, mean selected quality) pairs. Sizes with too
    few examples are skipped with a warning entry (quality = nan).
    """
    held_idx = pool.index_of(held_out)

    def mask_out(traces):
        out = []
        for t in traces:
            omega = t.omega.copy()
            omega[held_idx] = False
            if not omega.any():
                continue
            out.append(RoutingTrace(query=t.query, omega=omega, y=np.where(omega, t.y, np.nan)))
        return out

    params, _ = train(mask_out(train_traces), mask_out(val_traces), pool, router_cfg, train_cfg, weights, lam)
    candidates = [t for t in train_traces if t.omega[held_idx]]
    # one permutation per run; size-k subsets are nested prefixes of it
    perm = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 0xC01D])).permutation(
        len(candidates)
    )
    results: list[tuple[int | str, float]] = []
    for size in calibration_sizes:
        if size == "full":
            subset = list(train_traces)
        else:
            if size > len(candidates):
                results.append((size, float("nan")))
                continue
            subset = [candidates[i] for i in sorted(perm[: int(size)])]
        if size == 0:
            p_vec, b_vec = neutral_profile(len(slice_names), pool.size)
        else:
            p_vec, b_vec = build_capability_profile(subset, pool, held_out, slice_names)
        models = list(pool.models)
        old = models[held_idx]
        models[held_idx] = ModelDescriptor(
            model_id=old.model_id, cost=old.cost, latency=old.latency, profile=p_vec, pairwise=b_vec
        )
        patched = ModelPool(models=tuple(models), canonical_order=pool.canonical_order)
        policy = LatentRouterPolicy(params, router_cfg, patched, name=f"cold_start_{size}")
        ev = evaluate_policy(policy, test_traces, patched, lam)
        results.append((size, ev.selected_quality))
    return results


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the regularized incomplete beta function."""
    max_it, eps, fpmin = 200, 3e-16, 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < fpmin:
        d = fpmin
    d = 1.0 / d
    h = d
    for m in range(1, max_it + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        de = d * c
        h *= de
        if abs(de - 1.0) < eps:
            break
    return h


def reg_incomplete_beta(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_beta = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
    front = math.exp(ln_beta + a * math.log(x) + b * math.log(1.0 - x))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def welch_test(
    mean_a: float, std_a: float, n_a: int, mean_b: float, std_b: float, n_b: int
) -> float:
    """Two-sided Welch t-test p-value from summary statistics."""
    if n_a < 2 or n_b < 2:
        raise ValueError("welch_test needs n >= 2 per group")
    if std_a < 0 or std_b < 0:
        raise ValueError("standard deviations must be >= 0")
    va, vb = std_a**2 / n_a, std_b**2 / n_b
    if va + vb == 0.0:
        return 1.0 if mean_a == mean_b else 0.0
    t_stat = (mean_a - mean_b) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va**2 / (n_a - 1) + vb**2 / (n_b - 1))
    x = df / (df + t_stat**2)
    return reg_incomplete_beta(df / 2.0, 0.5, x)


@dataclass
class LatencyStats:
    mean_ms: float
    p95_ms: float
    n_measurements: int


def latency_probe(
    policy: RouterPolicy,
    traces: Sequence[RoutingTrace],
    repeats: int = 3,
    lam: float = 0.0,
) -> LatencyStats:
    """Wall-clock per routing decision; one untimed warm-up pass first."""
    if repeats < 1 or not traces:
        raise ValueError("latency_probe needs repeats >= 1 and non-empty traces")
    for t in traces:
        policy.decide(t.query, t.omega, lam)
    times = []
    for _ in range(repeats):
        for t in traces:
            t0 = time.perf_counter()
            policy.decide(t.query, t.omega, lam)
            times.append(time.perf_counter() - t0)
    arr = np.array(times) * 1000.0
    return LatencyStats(
        mean_ms=float(arr.mean()),
        p95_ms=float(np.percentile(arr, 95)),
        n_measurements=len(arr),
    )


def write_eval_csv(path: str | Path, rows: Sequence[dict]) -> None:
    """One row per policy per scenario; fixed column order for bitwise reproducibility."""
    cols = [
        "policy",
        "scenario",
        "lambda",
        "selected_quality",
        "oracle_regret",
        "nauc",
        "mse",
        "ndcg",
        "spearman",
        "top3_recall",
        "latency_ms",
        "n_traces",
    ]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            out = {}
            for c in cols:
                v = row.get(c, "")
                out[c] = repr(v) if isinstance(v, float) else v
            w.writerow(out)


def write_frontier_csv(path: str | Path, frontiers: dict[str, Sequence[FrontierPoint]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["policy", "lambda", "avg_cost", "avg_quality"])
        for name in sorted(frontiers):
            for p in frontiers[name]:
                w.writerow([name, repr(p.lam), repr(p.avg_cost), repr(p.avg_quality)])
