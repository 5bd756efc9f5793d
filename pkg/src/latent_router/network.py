"""The routing network: capsules, capability tokens, latent communication.

Forward structure per query:

  1. Project image/question tokens into the hidden space and extract C
     routing capsules by cross-attending learned capsule queries to the
     joint token sequence.
  2. Embed each candidate model's descriptor [profile; cost; latency;
     pairwise stats] into a capability token. Unavailable models keep
     tokens but are excluded from every attention support, from pairwise
     biases, from feedback weights, and from the final argmax.
  3. Run H communication layers; each layer lets model tokens read the
     capsules, compare pairwise through a learned bias injected into
     masked self-attention, and send score-weighted feedback to the
     capsules.
  4. A shared distributional head predicts per-model quality mean and
     uncertainty; a tanh-bounded correction (|delta| <= rho) from the
     pooled capsules refines the mean. Routing picks the available model
     with the highest corrected-mean-minus-cost score.

All sub-updates are residual. Pre-normalization is applied at the FFN
input only; attention logits and values operate on raw states (the
layer contracts pin e.g. r_hat = W_v r exactly for a single capsule).

The whole forward pass, including the layerwise scores and feedback
weights, is differentiable end to end, so analytic gradients agree with
finite differences for every parameter block.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .domain import ModelPool, MultimodalQuery, descriptor_matrix
from .tensor import Tensor


class ConfigError(Exception):
    """Router configuration inconsistent with the data it is applied to."""


@dataclass(frozen=True)
class RouterConfig:
    d_v: int
    d_q: int
    descriptor_dim: int
    capsule_count: int = 7
    comm_layers: int = 2
    hidden_dim: int = 32
    feedback_temp: float = 0.5
    correction_bound: float = 0.05
    sigma_floor: float = 0.01
    # ablation switches
    use_capsules: bool = True
    use_descriptor_tokens: bool = True
    distributional_head: bool = True
    pool_size: int | None = None  # required only when use_descriptor_tokens=False

    def __post_init__(self):
        if self.capsule_count < 1 or self.comm_layers < 0 or self.hidden_dim < 1:
            raise ConfigError("capsule_count >= 1, comm_layers >= 0, hidden_dim >= 1 required")
        if self.feedback_temp <= 0 or self.sigma_floor <= 0 or self.correction_bound < 0:
            raise ConfigError("feedback_temp > 0, sigma_floor > 0, correction_bound >= 0 required")
        if not self.use_descriptor_tokens and self.pool_size is None:
            raise ConfigError("pool_size required when descriptor tokens are ablated")


def _head_width(cfg: RouterConfig) -> int:
    """Hidden width of the pairwise-bias and layerwise-score heads.

    These run on O(K^2) rows, so they stay narrow; the score head is meant
    to be lightweight anyway.
    """
    return max(8, cfg.hidden_dim // 4)


def _block_shapes(cfg: RouterConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) for every parameter block, in canonical order."""
    d = cfg.hidden_dim
    blocks: list[tuple[str, tuple[int, ...], int]] = [
        ("capsule_queries", (cfg.capsule_count, d), d),
        ("image_proj", (cfg.d_v, d), cfg.d_v),
        ("question_proj", (cfg.d_q, d), cfg.d_q),
    ]
    if cfg.use_descriptor_tokens:
        blocks += [
            ("token_proj_w", (cfg.descriptor_dim, d), cfg.descriptor_dim),
            ("token_proj_b", (d,), 0),
        ]
    else:
        blocks += [("slot_tokens", (cfg.pool_size, d), d)]
    hw = _head_width(cfg)
    for h in range(cfg.comm_layers):
        blocks += [
            (f"l{h}.read_wq", (d, d), d),
            (f"l{h}.read_wk", (d, d), d),
            (f"l{h}.read_wv", (d, d), d),
            (f"l{h}.ffn_w1", (3 * d, d), 3 * d),
            (f"l{h}.ffn_b1", (d,), 0),
            (f"l{h}.ffn_w2", (d, d), d),
            (f"l{h}.ffn_b2", (d,), 0),
            (f"l{h}.bias_w1", (4 * d, hw), 4 * d),
            (f"l{h}.bias_b1", (hw,), 0),
            (f"l{h}.bias_w2", (hw, 1), hw),
            (f"l{h}.bias_b2", (1,), 0),
            (f"l{h}.score_w1", (d, hw), d),
            (f"l{h}.score_b1", (hw,), 0),
            (f"l{h}.score_w2", (hw, 1), hw),
            (f"l{h}.score_b2", (1,), 0),
            (f"l{h}.self_wq", (d, d), d),
            (f"l{h}.self_wk", (d, d), d),
            (f"l{h}.self_wv", (d, d), d),
            (f"l{h}.fb_wq", (d, d), d),
            (f"l{h}.fb_wk", (d, d), d),
            (f"l{h}.fb_wv", (d, d), d),
        ]
    out_in = d if cfg.comm_layers >= 1 else 2 * d
    out_width = 2 if cfg.distributional_head else 1
    blocks += [
        ("out_w1", (out_in, d), out_in),
        ("out_b1", (d,), 0),
        ("out_w2", (d, out_width), d),
        ("out_b2", (out_width,), 0),
        ("corr_w1", (2 * d, d), 2 * d),
        ("corr_b1", (d,), 0),
        ("corr_w2", (d, 1), d),
        ("corr_b2", (1,), 0),
    ]
    return blocks


class RouterParams:
    """All learnable weights, as named blocks in a fixed canonical order.

    Every head is shared across model tokens; there are no per-model
    parameters (except under the descriptor-token ablation, whose learned
    slot tokens deliberately reintroduce them).
    """

    def __init__(self, blocks: dict[str, Tensor]):
        self.blocks = blocks

    def __getitem__(self, name: str) -> Tensor:
        return self.blocks[name]

    def names(self) -> list[str]:
        return list(self.blocks)

    def zero_grad(self) -> None:
        for t in self.blocks.values():
            t.zero_grad()

    def copy(self) -> "RouterParams":
        return RouterParams(
            {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.blocks.items()}
        )

    @property
    def n_parameters(self) -> int:
        return sum(t.size for t in self.blocks.values())

    @staticmethod
    def initialize(cfg: RouterConfig, seed: int) -> "RouterParams":
        """Zero-mean uniform init scaled by 1/sqrt(fan_in); biases zero."""
        rng = np.random.default_rng(seed)
        blocks: dict[str, Tensor] = {}
        for name, shape, fan_in in _block_shapes(cfg):
            if fan_in == 0:
                data = np.zeros(shape)
            else:
                bound = 1.0 / np.sqrt(fan_in)
                data = rng.uniform(-bound, bound, size=shape)
            blocks[name] = Tensor(data, requires_grad=True)
        return RouterParams(blocks)


@dataclass
class ForwardRecord:
    """All intermediate and final states of one forward pass.

    Entries of mu, sigma, delta, mu_tilde and scores at unavailable
    positions are computed by the shared heads but are undefined for
    consumers; ``omega`` flags which entries are meaningful, and the
    routing policy never reads the others.
    """

    omega: np.ndarray
    capsules: list[Tensor]  # R^(0..H), each (C, d)
    model_states: list[Tensor]  # A^(0..H), each (K, d)
    layer_scores: list[Tensor]  # s^(h), each (K,)
    feedback_weights: list[Tensor]  # w^(h), each (K,)
    mu: Tensor  # (K,)
    sigma: Tensor  # (K,)
    delta: Tensor  # (K,)
    mu_tilde: Tensor  # (K,)
    scores: Tensor  # (K,), mu_tilde - lambda * cost
    chosen: int

    def masked(self, t: Tensor) -> np.ndarray:
        """NaN-filled copy of a per-model vector at unavailable positions."""
        out = t.data.copy()
        out[~self.omega] = np.nan
        return out


def _const(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=float))


def _mlp2(x: Tensor, p: RouterParams, w1: str, b1: str, w2: str, b2: str) -> Tensor:
    return T.affine(T.tanh(T.affine(x, p[w1], p[b1])), p[w2], p[b2])


class _MaskCache:
    """Constant index arrays and matrices derived from (omega, d); reused across traces."""

    def __init__(self):
        self._store: dict[tuple, tuple] = {}

    def get(self, omega: np.ndarray, d: int):
        key = (omega.shape[0], d, omega.tobytes())
        hit = self._store.get(key)
        if hit is None:
            k = omega.shape[0]
            avail = np.flatnonzero(omega)
            if len(avail) > 1:
                idx_i = np.repeat(avail, len(avail) - 1)
                idx_j = np.concatenate([avail[avail != i] for i in avail])
            else:
                idx_i = idx_j = np.empty(0, dtype=np.intp)
            placement = np.zeros((k * k, len(idx_i)))
            placement[idx_i * k + idx_j, np.arange(len(idx_i))] = 1.0
            row_mask = np.repeat(omega[:, None].astype(float), d, axis=1)
            hit = (avail, idx_i, idx_j, _const(placement), _const(row_mask))
            self._store[key] = hit
        return hit


_MASKS = _MaskCache()


def _tile_rows(v: Tensor, n: int) -> Tensor:
    """Stack a length-d vector as n identical rows."""
    d = v.data.shape[0]
    return T.matmul(_const(np.ones((n, 1))), T.reshape(v, (1, d)))


def project_query_tokens(query: MultimodalQuery, p: RouterParams, cfg: RouterConfig) -> Tensor:
    if query.image_tokens.shape[1] != cfg.d_v or query.question_tokens.shape[1] != cfg.d_q:
        raise ConfigError(
            f"token dims {(query.image_tokens.shape[1], query.question_tokens.shape[1])} "
            f"do not match config {(cfg.d_v, cfg.d_q)}"
        )
    vp = T.matmul(_const(query.image_tokens), p["image_proj"])
    qp = T.matmul(_const(query.question_tokens), p["question_proj"])
    return T.concat([vp, qp], axis=0)


def extract_capsules(query: MultimodalQuery, p: RouterParams, cfg: RouterConfig) -> Tensor:
    """Cross-attend C learned capsule queries to the projected [V;Q] sequence."""
    tokens = project_query_tokens(query, p, cfg)
    return extract_capsules_from_tokens(tokens, p, cfg)


def extract_capsules_from_tokens(tokens: Tensor, p: RouterParams, cfg: RouterConfig) -> Tensor:
    if not cfg.use_capsules:
        # capsule ablation: C copies of the mean-pooled projected tokens
        pooled = T.mean_rows(tokens)
        return _tile_rows(pooled, cfg.capsule_count)
    scale = 1.0 / np.sqrt(cfg.hidden_dim)
    logits = T.mul(T.matmul(p["capsule_queries"], T.transpose(tokens)), scale)
    attn = T.masked_softmax(logits, np.ones(tokens.data.shape[0], dtype=bool))
    return T.matmul(attn, tokens)


def build_model_tokens(pool: ModelPool, p: RouterParams, cfg: RouterConfig) -> Tensor:
    return build_model_tokens_from_matrix(descriptor_matrix(pool), p, cfg)


def build_model_tokens_from_matrix(descriptors: np.ndarray, p: RouterParams, cfg: RouterConfig) -> Tensor:
    if not cfg.use_descriptor_tokens:
        return p["slot_tokens"]
    if descriptors.shape[1] != cfg.descriptor_dim:
        raise ConfigError(
            f"descriptor length {descriptors.shape[1]} does not match config {cfg.descriptor_dim}"
        )
    return T.affine(_const(descriptors), p["token_proj_w"], p["token_proj_b"])


def model_read_capsules(a: Tensor, r: Tensor, p: RouterParams, layer: int, cfg: RouterConfig) -> Tensor:
    """Each model token reads the capsules, then a residual FFN update."""
    d = cfg.hidden_dim
    q = T.matmul(a, p[f"l{layer}.read_wq"])
    k = T.matmul(r, p[f"l{layer}.read_wk"])
    alpha = T.masked_softmax(
        T.mul(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(d)),
        np.ones(r.data.shape[0], dtype=bool),
    )
    r_hat = T.matmul(alpha, T.matmul(r, p[f"l{layer}.read_wv"]))
    feats = T.layer_norm(T.concat([a, r_hat, T.mul(a, r_hat)], axis=1))
    update = _mlp2(feats, p, f"l{layer}.ffn_w1", f"l{layer}.ffn_b1", f"l{layer}.ffn_w2", f"l{layer}.ffn_b2")
    return T.add(a, update)


def pairwise_bias(a_bar: Tensor, omega: np.ndarray, p: RouterParams, layer: int, cfg: RouterConfig) -> Tensor:
    """Comparison bias b_ij for available i != j; zero elsewhere. Not antisymmetric.

    b_ij = psi([a_i; a_j; a_i - a_j; a_i (*) a_j]) with a shared two-layer
    head. The first layer is evaluated in decomposed form,

        [ai; aj; ai-aj; ai*aj] @ [Wa; Wb; Wc; Wd]
            = ai @ (Wa+Wc) + aj @ (Wb-Wc) + (ai*aj) @ Wd,

    so the K-row products are computed once and gathered per pair instead
    of materializing the K^2 x 4d feature matrix.
    """
    k = a_bar.data.shape[0]
    d = cfg.hidden_dim
    _, idx_i, idx_j, placement, _ = _MASKS.get(omega, d)
    if len(idx_i) == 0:
        return _const(np.zeros((k, k)))
    w1 = p[f"l{layer}.bias_w1"]
    wa = T.gather(w1, np.arange(0, d))
    wb = T.gather(w1, np.arange(d, 2 * d))
    wc = T.gather(w1, np.arange(2 * d, 3 * d))
    wd = T.gather(w1, np.arange(3 * d, 4 * d))
    left = T.gather(T.matmul(a_bar, T.add(wa, wc)), idx_i)
    right = T.gather(T.matmul(a_bar, T.sub(wb, wc)), idx_j)
    had = T.matmul(T.mul(T.gather(a_bar, idx_i), T.gather(a_bar, idx_j)), wd)
    pre = T.add_rowvec(T.add(T.add(left, right), had), p[f"l{layer}.bias_b1"])
    vals = T.affine(T.tanh(pre), p[f"l{layer}.bias_w2"], p[f"l{layer}.bias_b2"])
    return T.reshape(T.matmul(placement, vals), (k, k))


def masked_self_attention(
    a_bar: Tensor, bias: Tensor, omega: np.ndarray, p: RouterParams, layer: int, cfg: RouterConfig
) -> Tensor:
    """Bias-injected self-attention over available keys, residual update.

    Unavailable query rows pass through unchanged; with bias = 0 this is
    standard masked self-attention.
    """
    if not omega.any():
        raise T.EmptySupportError("masked_self_attention: no available model")
    d = cfg.hidden_dim
    q = T.matmul(a_bar, p[f"l{layer}.self_wq"])
    k = T.matmul(a_bar, p[f"l{layer}.self_wk"])
    v = T.matmul(a_bar, p[f"l{layer}.self_wv"])
    logits = T.add(T.mul(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(d)), bias)
    attn = T.masked_softmax(logits, omega)
    update = T.matmul(attn, v)
    _, _, _, _, row_mask = _MASKS.get(omega, d)
    return T.add(a_bar, T.mul(row_mask, update))


def layer_score(a_next: Tensor, p: RouterParams, layer: int) -> Tensor:
    """Lightweight per-layer utility estimate of each model token."""
    vals = _mlp2(a_next, p, f"l{layer}.score_w1", f"l{layer}.score_b1", f"l{layer}.score_w2", f"l{layer}.score_b2")
    return T.reshape(vals, (a_next.data.shape[0],))


def feedback_weights(scores: Tensor, omega: np.ndarray, tau_fb: float) -> Tensor:
    # softmax_{i in omega}(-(max_j s_j - s_i)/tau) equals masked_softmax(s/tau):
    # the max subtraction is the stabilizer already inside masked_softmax.
    return T.masked_softmax(T.mul(scores, 1.0 / tau_fb), omega)


def capsule_feedback(
    r: Tensor, a_next: Tensor, weights: Tensor, omega: np.ndarray, p: RouterParams, layer: int, cfg: RouterConfig
) -> Tensor:
    """Capsules cross-attend to the weight-scaled available model states."""
    d = cfg.hidden_dim
    avail, _, _, _, _ = _MASKS.get(omega, d)
    a_av = T.gather(a_next, avail)
    w_col = T.matmul(T.reshape(T.gather(weights, avail), (len(avail), 1)), _const(np.ones((1, d))))
    keys = T.mul(w_col, a_av)
    q = T.matmul(r, p[f"l{layer}.fb_wq"])
    k = T.matmul(keys, p[f"l{layer}.fb_wk"])
    v = T.matmul(keys, p[f"l{layer}.fb_wv"])
    attn = T.masked_softmax(
        T.mul(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(d)),
        np.ones(len(avail), dtype=bool),
    )
    return T.add(r, T.matmul(attn, v))


def predict_outcomes(
    a_final: Tensor, p: RouterParams, cfg: RouterConfig, pooled_query: Tensor | None = None
) -> tuple[Tensor, Tensor]:
    """Shared head: per-model quality mean and uncertainty sigma = softplus(eta) + eps."""
    k = a_final.data.shape[0]
    if cfg.comm_layers >= 1:
        head_in = a_final
    else:
        # no-communication path: the head must still see the query
        if pooled_query is None:
            raise ConfigError("comm_layers=0 requires pooled query tokens for the outcome head")
        head_in = T.concat([a_final, _tile_rows(pooled_query, k)], axis=1)
    out = _mlp2(head_in, p, "out_w1", "out_b1", "out_w2", "out_b2")
    mu = T.column(out, 0)
    if cfg.distributional_head:
        sigma = T.add(T.softplus(T.column(out, 1)), cfg.sigma_floor)
    else:
        sigma = _const(np.full(k, cfg.sigma_floor))
    return mu, sigma


def bounded_correction(
    a_final: Tensor, r_final: Tensor, mu: Tensor, p: RouterParams, cfg: RouterConfig
) -> tuple[Tensor, Tensor]:
    """delta = rho * tanh(h([a_i; mean-pooled capsules])); mu_tilde = mu + delta."""
    k = a_final.data.shape[0]
    pooled = T.mean_rows(r_final)
    inp = T.concat([a_final, _tile_rows(pooled, k)], axis=1)
    raw = T.reshape(_mlp2(inp, p, "corr_w1", "corr_b1", "corr_w2", "corr_b2"), (k,))
    delta = T.mul(T.tanh(raw), cfg.correction_bound)
    return delta, T.add(mu, delta)


def route(
    mu_tilde: np.ndarray, costs: np.ndarray, omega: np.ndarray, lam: float
) -> tuple[np.ndarray, int]:
    """Utility scores and the chosen available model.

    Ties break toward the lower cost, then the earlier canonical index.
    """
    if not omega.any():
        raise T.EmptySupportError("route: no available model")
    scores = mu_tilde - lam * costs
    chosen = -1
    for i in np.flatnonzero(omega):
        if chosen < 0:
            chosen = int(i)
            continue
        if scores[i] > scores[chosen] or (
            scores[i] == scores[chosen] and costs[i] < costs[chosen]
        ):
            chosen = int(i)
    return scores, chosen


def forward(
    query: MultimodalQuery,
    pool: ModelPool,
    omega: np.ndarray,
    p: RouterParams,
    cfg: RouterConfig,
    lam: float = 0.0,
) -> ForwardRecord:
    descriptors = descriptor_matrix(pool)
    return forward_from_arrays(query, descriptors, pool.costs(), omega, p, cfg, lam)


def forward_from_arrays(
    query: MultimodalQuery,
    descriptors: np.ndarray,
    costs: np.ndarray,
    omega: np.ndarray,
    p: RouterParams,
    cfg: RouterConfig,
    lam: float = 0.0,
) -> ForwardRecord:
    if not omega.any():
        raise T.EmptySupportError("forward: no available model")
    tokens = project_query_tokens(query, p, cfg)
    capsules = [extract_capsules_from_tokens(tokens, p, cfg)]
    states = [build_model_tokens_from_matrix(descriptors, p, cfg)]
    layer_scores: list[Tensor] = []
    fb_weights: list[Tensor] = []
    for h in range(cfg.comm_layers):
        a_bar = model_read_capsules(states[-1], capsules[-1], p, h, cfg)
        bias = pairwise_bias(a_bar, omega, p, h, cfg)
        a_next = masked_self_attention(a_bar, bias, omega, p, h, cfg)
        s_h = layer_score(a_next, p, h)
        w_h = feedback_weights(s_h, omega, cfg.feedback_temp)
        r_next = capsule_feedback(capsules[-1], a_next, w_h, omega, p, h, cfg)
        states.append(a_next)
        capsules.append(r_next)
        layer_scores.append(s_h)
        fb_weights.append(w_h)
    pooled_query = T.mean_rows(tokens) if cfg.comm_layers == 0 else None
    mu, sigma = predict_outcomes(states[-1], p, cfg, pooled_query=pooled_query)
    delta, mu_tilde = bounded_correction(states[-1], capsules[-1], mu, p, cfg)
    score_t = T.sub(mu_tilde, _const(lam * costs))
    _, chosen = route(mu_tilde.data, costs, omega, lam)
    return ForwardRecord(
        omega=np.asarray(omega, dtype=bool).copy(),
        capsules=capsules,
        model_states=states,
        layer_scores=layer_scores,
        feedback_weights=fb_weights,
        mu=mu,
        sigma=sigma,
        delta=delta,
        mu_tilde=mu_tilde,
        scores=score_t,
        chosen=chosen,
    )


CHECKPOINT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    params: RouterParams,
    cfg: RouterConfig,
    rng_seed: int,
    training_meta: dict | None = None,
) -> None:
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(cfg),
        "rng_seed": rng_seed,
        "training_meta": training_meta or {},
        "params": {
            name: {"shape": list(t.shape), "data": t.data.ravel().tolist()}
            for name, t in params.blocks.items()
        },
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)


def load_checkpoint(path: str | Path) -> tuple[RouterParams, RouterConfig, dict]:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('format_version')}")
    cfg_fields = {f.name for f in fields(RouterConfig)}
    cfg = RouterConfig(**{k: v for k, v in doc["config"].items() if k in cfg_fields})
    blocks = {}
    for name, rec in doc["params"].items():
        arr = np.array(rec["data"], dtype=float).reshape(rec["shape"])
        blocks[name] = Tensor(arr, requires_grad=True)
    meta = {"rng_seed": doc["rng_seed"], "training_meta": doc["training_meta"]}
    return RouterParams(blocks), cfg, meta
