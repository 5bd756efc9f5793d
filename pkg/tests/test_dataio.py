import json

import numpy as np
import pytest

from latent_router.dataio import (
    PoolSpec,
    assemble_pool,
    load_pool_spec,
    load_traces,
    save_pool_spec,
    save_traces,
)
from latent_router.domain import ValidationError
from latent_router.synth import GeneratorConfig, generate_dataset, load_ground_truth, save_ground_truth


@pytest.fixture(scope="module")
def small_dataset():
    cfg = GeneratorConfig(queries_n=140, seed=0)
    pool_spec, train, val, test, truth, _ = generate_dataset(cfg)
    return cfg, pool_spec, train, val, test, truth


class TestTraceRoundTrip:
    def test_bit_exact(self, small_dataset, tmp_path):
        cfg, pool_spec, train, *_ = small_dataset
        path = tmp_path / "traces.jsonl"
        save_traces(path, train)
        loaded = load_traces(path)
        assert len(loaded) == len(train)
        for a, b in zip(train, loaded):
            assert a.query.query_id == b.query.query_id
            assert a.query.slice_label == b.query.slice_label
            assert np.array_equal(a.query.image_tokens, b.query.image_tokens)
            assert np.array_equal(a.query.question_tokens, b.query.question_tokens)
            assert np.array_equal(a.omega, b.omega)
            assert np.array_equal(a.y, b.y, equal_nan=True)

    def test_unavailable_entries_serialized_null(self, small_dataset, tmp_path):
        cfg, pool_spec, train, *_ = small_dataset
        path = tmp_path / "traces.jsonl"
        save_traces(path, train[:5])
        for line in path.read_text().splitlines():
            row = json.loads(line)
            for o, y in zip(row["omega"], row["y"]):
                assert (y is None) == (not o)


class TestPoolSpec:
    def test_round_trip(self, small_dataset, tmp_path):
        cfg, pool_spec, *_ = small_dataset
        path = tmp_path / "pool.json"
        save_pool_spec(path, pool_spec)
        loaded = load_pool_spec(path)
        assert loaded == pool_spec

    def test_rejects_unsorted(self):
        with pytest.raises(ValidationError):
            PoolSpec(model_ids=("b", "a"), raw_costs=(1.0, 2.0), raw_latencies=(1.0, 1.0))

    def test_rejects_mismatched_file(self, tmp_path):
        path = tmp_path / "pool.json"
        path.write_text(json.dumps({"models": [{"id": "a", "raw_cost": 1, "raw_latency": 1}],
                                     "canonical_order": ["a", "b"]}))
        with pytest.raises(ValidationError):
            load_pool_spec(path)


class TestAssemblePool:
    def test_profiles_in_range(self, small_dataset):
        cfg, pool_spec, train, *_ = small_dataset
        pool = assemble_pool(pool_spec, train, cfg.slice_names)
        for m in pool.models:
            assert m.profile.shape == (1 + cfg.slice_count,)
            assert m.pairwise.shape == (cfg.pool_size - 1,)
            assert 0.0 <= m.cost <= 1.0
            assert np.all((m.profile >= 0) & (m.profile <= 1))
            assert np.all((m.pairwise >= 0) & (m.pairwise <= 1))

    def test_profiles_use_only_calibration(self, small_dataset):
        cfg, pool_spec, train, val, test, _ = small_dataset
        p1 = assemble_pool(pool_spec, train, cfg.slice_names)
        p2 = assemble_pool(pool_spec, train, cfg.slice_names)
        for a, b in zip(p1.models, p2.models):
            assert np.array_equal(a.profile, b.profile)
        p3 = assemble_pool(pool_spec, list(train) + list(test), cfg.slice_names)
        changed = any(
            not np.array_equal(a.profile, b.profile) for a, b in zip(p1.models, p3.models)
        )
        assert changed


class TestGroundTruthSidecar:
    def test_round_trip(self, small_dataset, tmp_path):
        cfg, pool_spec, train, val, test, truth = small_dataset
        path = tmp_path / "truth.json"
        save_ground_truth(path, truth, cfg)
        loaded, sharp = load_ground_truth(path)
        assert sharp == cfg.sharpness
        assert np.array_equal(loaded.skills, truth.skills)
        qid = train[0].query.query_id
        assert np.array_equal(loaded.requirements[qid], truth.requirements[qid])
