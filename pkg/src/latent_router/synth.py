"""Seeded synthetic routing benchmark with guaranteed preference reversals.

Each query has a latent requirement vector on the skill simplex, drawn from
a slice-specific Dirichlet so task slices skew toward different skills.
Image tokens encode the requirement as redundant noisy copies plus pure
distractor dims, but only on a salient subset of token positions (the rest
are filler noise), so position-selective attention recovers the signal
better than mean pooling. Question tokens carry a weaker, linearly mixed
code of the same requirement.

Model quality is a logistic in skill-requirement alignment plus a
per-model base ability. One designated specialist pair gets exactly
opposed skill vectors and equal base ability, so its true ordering flips
query by query: the construct that additive query+model scoring cannot
represent. Raw cost correlates with base ability, keeping the strongest
and cheapest models distinct.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataio import PoolSpec
from .domain import MultimodalQuery, RoutingTrace


class GeneratorError(Exception):
    """Dataset generation could not satisfy its guarantees."""


@dataclass(frozen=True)
class GeneratorConfig:
    pool_size: int = 8
    skill_dims: int = 4
    queries_n: int = 7000
    noise_std: float = 0.04
    sharpness: float = 3.0
    feature_redundancy: int = 3
    distractor_dims: int = 12
    slice_count: int = 4
    availability_drop_rate: float = 0.15
    split_ratios: tuple[float, float, float] = (5 / 7, 1 / 7, 1 / 7)
    seed: int = 0
    image_token_count: int = 6
    question_token_count: int = 4

    def __post_init__(self):
        if self.pool_size < 2:
            raise GeneratorError("pool_size must be >= 2")
        if not (0 <= self.availability_drop_rate < 1):
            raise GeneratorError("availability_drop_rate must be in [0, 1)")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise GeneratorError("split ratios must sum to 1")
        if self.noise_std < 0 or self.sharpness <= 0 or self.feature_redundancy < 1:
            raise GeneratorError("noise_std >= 0, sharpness > 0, feature_redundancy >= 1 required")

    @property
    def token_dim(self) -> int:
        return self.skill_dims * self.feature_redundancy + self.distractor_dims

    @property
    def slice_names(self) -> tuple[str, ...]:
        return tuple(f"slice{i}" for i in range(self.slice_count))


@dataclass
class GroundTruth:
    skills: np.ndarray  # (K, S) in [-1, 1]
    base_ability: np.ndarray  # (K,)
    specialist_pair: tuple[int, int]
    requirements: dict[str, np.ndarray] = field(default_factory=dict)  # query_id -> (S,)
    outcomes: dict[str, np.ndarray] = field(default_factory=dict)  # query_id -> (K,) full y
    question_mixer: np.ndarray | None = None  # (S, S)

    def expected_quality(self, requirement: np.ndarray, sharpness: float) -> np.ndarray:
        """Closed-form mean outcome for every model on one requirement."""
        z = sharpness * (self.skills @ requirement) + self.base_ability
        return 1.0 / (1.0 + np.exp(-z))


def _pool_rng(cfg: GeneratorConfig, attempt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x9001, attempt]))


def _query_rng(cfg: GeneratorConfig, attempt: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x51EED, attempt, index]))


def generate_pool(
    cfg: GeneratorConfig, attempt: int = 0
) -> tuple[PoolSpec, GroundTruth]:
    """Seeded pool with one exactly-opposed specialist pair (indices 0 and 1)."""
    rng = _pool_rng(cfg, attempt)
    k, s = cfg.pool_size, cfg.skill_dims
    # centered rows: every model is strong on some skills and weak on others,
    # so the per-query best model varies and no generalist dominates
    skills = rng.uniform(-1.0, 1.0, size=(k, s))
    skills -= skills.mean(axis=1, keepdims=True)
    skills = np.clip(skills, -1.0, 1.0)
    signs = np.where(np.arange(s) % 2 == 0, 1.0, -1.0)
    v = signs * rng.uniform(0.6, 1.0, size=s)
    v -= v.mean()
    skills[0] = v
    skills[1] = -v
    base = rng.uniform(-0.3, 0.3, size=k)
    # the first specialist gets an edge large enough that the pair's majority
    # ordering and its mean outcome gap point the same way (flips stay frequent)
    base[0] = abs(base[0]) + 0.05
    base[1] = base[0] - 0.6
    if k > 2:
        # one flagship generalist: frequently the per-query best and the most
        # expensive model, so removing the strongest is a real loss
        base[k - 1] = 0.6
    raw_costs = np.exp(2.0 * base + 0.25 * rng.standard_normal(k))
    raw_lat = rng.uniform(0.1, 2.0, size=k)
    ids = tuple(f"m{i:02d}" for i in range(k))
    spec = PoolSpec(model_ids=ids, raw_costs=tuple(raw_costs), raw_latencies=tuple(raw_lat))
    q_mix = rng.standard_normal((s, s)) / np.sqrt(s)
    truth = GroundTruth(
        skills=skills, base_ability=base, specialist_pair=(0, 1), question_mixer=q_mix
    )
    return spec, truth


def _encode_tokens(
    code: np.ndarray,
    n_tokens: int,
    cfg: GeneratorConfig,
    rng: np.random.Generator,
    amplitude: float,
    noise_scale: float,
) -> np.ndarray:
    """Tokens whose first half carry redundant copies of ``code``; rest are filler."""
    d = cfg.token_dim
    n_signal = max(1, n_tokens // 2)
    tokens = rng.standard_normal((n_tokens, d))
    copies = np.tile(code, cfg.feature_redundancy) * amplitude
    sig_width = cfg.skill_dims * cfg.feature_redundancy
    for t in range(n_signal):
        tokens[t, :sig_width] = copies + noise_scale * cfg.noise_std * rng.standard_normal(sig_width)
        tokens[t, sig_width:] = rng.standard_normal(d - sig_width)
    return tokens


def decode_requirement(image_tokens: np.ndarray, cfg: GeneratorConfig) -> np.ndarray:
    """The declared linear decode: average the copy blocks of the salient tokens."""
    n_signal = max(1, cfg.image_token_count // 2)
    sig = image_tokens[:n_signal, : cfg.skill_dims * cfg.feature_redundancy]
    blocks = sig.reshape(n_signal, cfg.feature_redundancy, cfg.skill_dims)
    return blocks.mean(axis=(0, 1))


def generate_query(
    cfg: GeneratorConfig, truth: GroundTruth, index: int, attempt: int = 0
) -> tuple[MultimodalQuery, np.ndarray, str]:
    """One query: slice label, simplex requirement, and its token encodings."""
    rng = _query_rng(cfg, attempt, index)
    slice_idx = int(rng.integers(cfg.slice_count))
    alpha = np.full(cfg.skill_dims, 0.4)
    alpha[slice_idx % cfg.skill_dims] += 2.2
    requirement = rng.dirichlet(alpha)
    image = _encode_tokens(
        requirement, cfg.image_token_count, cfg, rng, amplitude=1.0, noise_scale=1.0
    )
    mixed = truth.question_mixer @ requirement
    question = _encode_tokens(
        mixed, cfg.question_token_count, cfg, rng, amplitude=0.7, noise_scale=2.5
    )
    query = MultimodalQuery(
        query_id=f"q{index:06d}",
        image_tokens=image,
        question_tokens=question,
        slice_label=f"slice{slice_idx}",
    )
    return query, requirement, query.slice_label


def realize_outcomes(
    requirement: np.ndarray,
    truth: GroundTruth,
    cfg: GeneratorConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Noisy clipped-logistic outcomes plus the availability mask.

    The specialist pair is always available; every other model drops out
    independently at the configured rate.
    """
    mean = truth.expected_quality(requirement, cfg.sharpness)
    y = np.clip(mean + cfg.noise_std * rng.standard_normal(cfg.pool_size), 0.0, 1.0)
    omega = rng.random(cfg.pool_size) >= cfg.availability_drop_rate
    omega[list(truth.specialist_pair)] = True
    return y, omega


def _split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    return n_train, n_val, n - n_train - n_val


@dataclass
class ReversalReport:
    n_test: int
    first_better: int
    second_better: int

    @property
    def reversal_count(self) -> int:
        """Size of the minority ordering: both directions must be well represented."""
        return min(self.first_better, self.second_better)


def generate_dataset(
    cfg: GeneratorConfig,
) -> tuple[PoolSpec, list[RoutingTrace], list[RoutingTrace], list[RoutingTrace], GroundTruth, ReversalReport]:
    """Full dataset: disjoint splits plus ground truth and the reversal report.

    Regenerates with a derived seed (up to 10 attempts) if the test split
    does not contain at least 5% reversal traces for the specialist pair.
    """
    for attempt in range(10):
        pool_spec, truth = generate_pool(cfg, attempt)
        traces: list[RoutingTrace] = []
        for i in range(cfg.queries_n):
            query, req, _ = generate_query(cfg, truth, i, attempt)
            rng = _query_rng(cfg, attempt, 10_000_000 + i)
            y, omega = realize_outcomes(req, truth, cfg, rng)
            truth.requirements[query.query_id] = req
            truth.outcomes[query.query_id] = y
            y_masked = y.copy()
            y_masked[~omega] = np.nan
            traces.append(RoutingTrace(query=query, omega=omega, y=y_masked))
        n_train, n_val, n_test = _split_sizes(cfg.queries_n, cfg.split_ratios)
        train = traces[:n_train]
        val = traces[n_train : n_train + n_val]
        test = traces[n_train + n_val :]
        i, j = truth.specialist_pair
        first = sum(1 for t in test if t.y[i] > t.y[j])
        second = sum(1 for t in test if t.y[j] > t.y[i])
        report = ReversalReport(n_test=n_test, first_better=first, second_better=second)
        if report.reversal_count >= 0.05 * n_test:
            return pool_spec, train, val, test, truth, report
    raise GeneratorError("reversal guarantee unsatisfiable after 10 attempts")


def save_ground_truth(path: str | Path, truth: GroundTruth, cfg: GeneratorConfig) -> None:
    doc = {
        "skills": truth.skills.tolist(),
        "base_ability": truth.base_ability.tolist(),
        "specialist_pair": list(truth.specialist_pair),
        "question_mixer": truth.question_mixer.tolist(),
        "sharpness": cfg.sharpness,
        "requirements": {k: v.tolist() for k, v in truth.requirements.items()},
        "outcomes": {k: v.tolist() for k, v in truth.outcomes.items()},
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)


def load_ground_truth(path: str | Path) -> tuple[GroundTruth, float]:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    truth = GroundTruth(
        skills=np.array(doc["skills"]),
        base_ability=np.array(doc["base_ability"]),
        specialist_pair=tuple(doc["specialist_pair"]),
        question_mixer=np.array(doc["question_mixer"]),
        requirements={k: np.array(v) for k, v in doc["requirements"].items()},
        outcomes={k: np.array(v) for k, v in doc["outcomes"].items()},
    )
    return truth, float(doc["sharpness"])
