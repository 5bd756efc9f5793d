"""Shared builders for hand-sized pools, queries and router configs."""

import numpy as np

from latent_router.domain import ModelDescriptor, ModelPool, MultimodalQuery, RoutingTrace
from latent_router.network import RouterConfig, RouterParams


def make_pool(k=3, n_slices=2, seed=0):
    rng = np.random.default_rng(seed)
    models = []
    ids = [f"m{i:02d}" for i in range(k)]
    costs = np.linspace(0.0, 1.0, k) if k > 1 else np.array([0.0])
    for i, mid in enumerate(ids):
        models.append(
            ModelDescriptor(
                model_id=mid,
                cost=float(costs[i]),
                latency=float(rng.random()),
                profile=rng.random(1 + n_slices),
                pairwise=rng.random(k - 1),
            )
        )
    return ModelPool(models=tuple(models), canonical_order=tuple(ids))


def make_query(n=4, l=3, d_v=6, d_q=5, seed=0, query_id="q0"):
    rng = np.random.default_rng(seed)
    return MultimodalQuery(
        query_id=query_id,
        image_tokens=rng.standard_normal((n, d_v)),
        question_tokens=rng.standard_normal((l, d_q)),
        slice_label="slice0",
    )


def make_config(pool, query, n_slices=2, **overrides):
    kwargs = dict(
        d_v=query.image_tokens.shape[1],
        d_q=query.question_tokens.shape[1],
        descriptor_dim=(1 + n_slices) + 2 + (pool.size - 1),
        capsule_count=3,
        comm_layers=2,
        hidden_dim=8,
    )
    kwargs.update(overrides)
    return RouterConfig(**kwargs)


def make_setup(k=3, n_slices=2, seed=0, **cfg_overrides):
    pool = make_pool(k=k, n_slices=n_slices, seed=seed)
    query = make_query(seed=seed + 1)
    cfg = make_config(pool, query, n_slices=n_slices, **cfg_overrides)
    params = RouterParams.initialize(cfg, seed=seed + 2)
    return pool, query, cfg, params


def make_trace(query, omega, y):
    y = np.asarray(y, dtype=float).copy()
    omega = np.asarray(omega, dtype=bool)
    y[~omega] = np.nan
    return RoutingTrace(query=query, omega=omega, y=y)
