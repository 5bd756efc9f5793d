"""Data model for queries, model pools, routing traces, and capability profiles.

All types are immutable value objects. Quality scores ``y`` live on a single
normalized [0, 1] scale; costs and latencies are min-max normalized within a
pool. The canonical pool order is alphabetical by model_id, and every
per-model array in the package follows it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np


class ValidationError(Exception):
    """Raised when inputs violate a documented domain contract."""


class InsufficientCalibrationError(ValidationError):
    """Target model absent from every calibration trace."""


@dataclass(frozen=True)
class MultimodalQuery:
    query_id: str
    image_tokens: np.ndarray  # (N, d_v)
    question_tokens: np.ndarray  # (L, d_q)
    slice_label: str | None = None


@dataclass(frozen=True)
class ModelDescriptor:
    model_id: str
    cost: float  # normalized, in [0, 1]
    latency: float  # normalized, in [0, 1]
    profile: np.ndarray  # [overall mean quality, per-slice mean quality...]
    pairwise: np.ndarray  # win rates vs other pool members, canonical order, self excluded


@dataclass(frozen=True)
class RoutingTrace:
    """One query plus availability mask and observed per-model quality.

    ``y`` has one entry per pool slot in canonical order; entries where
    ``omega`` is False are NaN and must never be read.
    """

    query: MultimodalQuery
    omega: np.ndarray  # bool, (K,)
    y: np.ndarray  # float, (K,), NaN where unavailable


@dataclass(frozen=True)
class ModelPool:
    models: tuple[ModelDescriptor, ...]
    canonical_order: tuple[str, ...]

    def __post_init__(self):
        ids = [m.model_id for m in self.models]
        if len(set(ids)) != len(ids):
            raise ValidationError("pool has duplicate model_ids")
        if tuple(ids) != self.canonical_order:
            raise ValidationError("models not in canonical order")
        if list(self.canonical_order) != sorted(self.canonical_order):
            raise ValidationError("canonical order must be alphabetical by model_id")

    @property
    def size(self) -> int:
        return len(self.models)

    def costs(self) -> np.ndarray:
        return np.array([m.cost for m in self.models])

    def latencies(self) -> np.ndarray:
        return np.array([m.latency for m in self.models])

    def index_of(self, model_id: str) -> int:
        return self.canonical_order.index(model_id)


@dataclass(frozen=True)
class UtilitySpec:
    lam: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValidationError(f"lambda must be >= 0, got {self.lam}")


def compute_utility(y: float, c: float, spec: UtilitySpec) -> float:
    """Quality minus the cost penalty: y - lambda * c."""
    return y - spec.lam * c


def normalize_pool_costs(raw_costs: Sequence[float]) -> np.ndarray:
    """Min-max normalize raw costs over the pool; constant pools map to zeros."""
    raw = np.asarray(raw_costs, dtype=float)
    if np.any(raw < 0):
        raise ValidationError("raw costs must be non-negative")
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def descriptor_vector(m: ModelDescriptor) -> np.ndarray:
    """The flat [profile; cost; latency; pairwise] input to the token projection."""
    return np.concatenate([m.profile, [m.cost, m.latency], m.pairwise])


def descriptor_matrix(pool: ModelPool) -> np.ndarray:
    return np.stack([descriptor_vector(m) for m in pool.models])


def descriptor_dim(n_slices: int, pool_size: int) -> int:
    return (1 + n_slices) + 2 + (pool_size - 1)


def build_capability_profile(
    traces: Sequence[RoutingTrace],
    pool: ModelPool,
    target: str,
    slice_names: Sequence[str],
) -> tuple[np.ndarray, np.ndarray]:
    """Profile p and pairwise win rates b for one model, from calibration traces.

    p = [overall mean quality, per-slice mean quality]; slices without
    coverage fall back to the overall mean. b_j is the win rate against
    model j over traces where both were available (ties count 0.5); pairs
    with no joint coverage fall back to 0.5. Self is excluded from b.
    """
    ti = pool.index_of(target)
    qualities: list[float] = []
    per_slice: dict[str, list[float]] = {s: [] for s in slice_names}
    k = pool.size
    wins = np.zeros(k)
    joint = np.zeros(k)
    for tr in traces:
        if not tr.omega[ti]:
            continue
        yt = float(tr.y[ti])
        qualities.append(yt)
        sl = tr.query.slice_label
        if sl is not None and sl in per_slice:
            per_slice[sl].append(yt)
        for j in range(k):
            if j == ti or not tr.omega[j]:
                continue
            joint[j] += 1
            yj = float(tr.y[j])
            if yt > yj:
                wins[j] += 1
            elif yt == yj:
                wins[j] += 0.5
    if not qualities:
        raise InsufficientCalibrationError(
            f"model {target!r} absent from every calibration trace"
        )
    overall = float(np.mean(qualities))
    p = [overall]
    for s in slice_names:
        vals = per_slice[s]
        p.append(float(np.mean(vals)) if vals else overall)
    b = np.full(k, 0.5)
    covered = joint > 0
    b[covered] = wins[covered] / joint[covered]
    b = np.delete(b, ti)
    return np.array(p), b


def neutral_profile(n_slices: int, pool_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Cold-start prior: mid-scale quality everywhere, even win rates."""
    return np.full(1 + n_slices, 0.5), np.full(pool_size - 1, 0.5)


@dataclass
class ValidationReport:
    n_traces: int
    violations: dict[str, int] = field(default_factory=dict)
    first_violation: dict[str, str] = field(default_factory=dict)

    @property
    def total_violations(self) -> int:
        return sum(self.violations.values())

    def ok(self) -> bool:
        return self.total_violations == 0

    def _flag(self, category: str, detail: str) -> None:
        self.violations[category] = self.violations.get(category, 0) + 1
        self.first_violation.setdefault(category, detail)


def validate_dataset(
    splits: Mapping[str, Sequence[RoutingTrace]] | Sequence[RoutingTrace],
    pool: ModelPool,
) -> ValidationReport:
    """Report-only check of all trace invariants and split disjointness.

    Accepts either a single trace list or a mapping of split name to trace
    list; split leakage (a query_id in more than one split) is flagged in
    the mapping form.
    """
    if not isinstance(splits, Mapping):
        splits = {"all": list(splits)}
    k = pool.size
    report = ValidationReport(n_traces=sum(len(v) for v in splits.values()))
    dims: tuple[int, int] | None = None
    seen: dict[str, str] = {}
    for split_name, traces in splits.items():
        for tr in traces:
            q = tr.query
            qid = q.query_id
            if qid in seen:
                if seen[qid] != split_name:
                    report._flag("split_leak", f"query_id {qid} in {seen[qid]} and {split_name}")
                else:
                    report._flag("duplicate_query_id", f"query_id {qid} repeated in {split_name}")
            seen.setdefault(qid, split_name)
            if q.image_tokens.ndim != 2 or q.image_tokens.shape[0] < 1:
                report._flag("token_shape", f"{qid}: bad image token shape {q.image_tokens.shape}")
            if q.question_tokens.ndim != 2 or q.question_tokens.shape[0] < 1:
                report._flag("token_shape", f"{qid}: bad question token shape {q.question_tokens.shape}")
            if not (np.all(np.isfinite(q.image_tokens)) and np.all(np.isfinite(q.question_tokens))):
                report._flag("non_finite_tokens", f"{qid}: non-finite token values")
            d = (q.image_tokens.shape[1], q.question_tokens.shape[1])
            if dims is None:
                dims = d
            elif d != dims:
                report._flag("inconsistent_dims", f"{qid}: dims {d} != {dims}")
            if tr.omega.shape != (k,) or tr.y.shape != (k,):
                report._flag("mask_shape", f"{qid}: omega/y shape mismatch with pool size {k}")
                continue
            if not tr.omega.any():
                report._flag("empty_availability", f"{qid}: no available model")
            present = ~np.isnan(tr.y)
            if not np.array_equal(present, tr.omega):
                report._flag("y_presence", f"{qid}: y defined where omega is False or missing where True")
            avail_y = tr.y[tr.omega & present]
            if avail_y.size and (avail_y.min() < 0.0 or avail_y.max() > 1.0):
                report._flag("y_range", f"{qid}: y outside [0,1]")
    for m in pool.models:
        if not (0.0 <= m.cost <= 1.0):
            report._flag("cost_range", f"{m.model_id}: cost {m.cost} outside [0,1]")
        if np.any(m.profile < 0.0) or np.any(m.profile > 1.0):
            report._flag("profile_range", f"{m.model_id}: profile outside [0,1]")
        if np.any(m.pairwise < 0.0) or np.any(m.pairwise > 1.0):
            report._flag("pairwise_range", f"{m.model_id}: win rate outside [0,1]")
    return report
