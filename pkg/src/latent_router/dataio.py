"""On-disk formats: JSON Lines trace files and the pool descriptor file.

Floats are serialized with Python's shortest round-trip repr, so every
value survives a save/load cycle bit-exactly. Files are UTF-8.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .domain import (
    ModelDescriptor,
    ModelPool,
    MultimodalQuery,
    RoutingTrace,
    ValidationError,
    build_capability_profile,
    neutral_profile,
    normalize_pool_costs,
)


@dataclass(frozen=True)
class PoolSpec:
    """Raw pool metadata as stored on disk: ids plus unnormalized cost/latency."""

    model_ids: tuple[str, ...]
    raw_costs: tuple[float, ...]
    raw_latencies: tuple[float, ...]

    def __post_init__(self):
        if list(self.model_ids) != sorted(self.model_ids):
            raise ValidationError("pool file models must be in canonical (alphabetical) order")


def save_traces(path: str | Path, traces: Sequence[RoutingTrace]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for tr in traces:
            row = {
                "query_id": tr.query.query_id,
                "slice": tr.query.slice_label,
                "V": tr.query.image_tokens.tolist(),
                "Q": tr.query.question_tokens.tolist(),
                "omega": [bool(v) for v in tr.omega],
                "y": [float(v) if o else None for v, o in zip(tr.y, tr.omega)],
            }
            f.write(json.dumps(row) + "\n")


def load_traces(path: str | Path) -> list[RoutingTrace]:
    traces = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            row = json.loads(line)
            omega = np.array(row["omega"], dtype=bool)
            y = np.array([np.nan if v is None else v for v in row["y"]], dtype=float)
            traces.append(
                RoutingTrace(
                    query=MultimodalQuery(
                        query_id=row["query_id"],
                        image_tokens=np.array(row["V"], dtype=float),
                        question_tokens=np.array(row["Q"], dtype=float),
                        slice_label=row.get("slice"),
                    ),
                    omega=omega,
                    y=y,
                )
            )
    return traces


def save_pool_spec(path: str | Path, spec: PoolSpec) -> None:
    doc = {
        "models": [
            {"id": mid, "raw_cost": c, "raw_latency": l}
            for mid, c, l in zip(spec.model_ids, spec.raw_costs, spec.raw_latencies)
        ],
        "canonical_order": list(spec.model_ids),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)


def load_pool_spec(path: str | Path) -> PoolSpec:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    order = doc["canonical_order"]
    by_id = {m["id"]: m for m in doc["models"]}
    if sorted(by_id) != sorted(order) or len(by_id) != len(doc["models"]):
        raise ValidationError("pool file models and canonical_order disagree")
    return PoolSpec(
        model_ids=tuple(order),
        raw_costs=tuple(float(by_id[m]["raw_cost"]) for m in order),
        raw_latencies=tuple(float(by_id[m]["raw_latency"]) for m in order),
    )


def _skeleton_pool(spec: PoolSpec, n_slices: int) -> ModelPool:
    costs = normalize_pool_costs(spec.raw_costs)
    lats = normalize_pool_costs(spec.raw_latencies)
    k = len(spec.model_ids)
    models = []
    for i, mid in enumerate(spec.model_ids):
        p, b = neutral_profile(n_slices, k)
        models.append(
            ModelDescriptor(
                model_id=mid, cost=float(costs[i]), latency=float(lats[i]), profile=p, pairwise=b
            )
        )
    return ModelPool(models=tuple(models), canonical_order=spec.model_ids)


def assemble_pool(
    spec: PoolSpec,
    calibration_traces: Sequence[RoutingTrace],
    slice_names: Sequence[str],
) -> ModelPool:
    """Build the full pool: normalized cost/latency plus calibration profiles."""
    skeleton = _skeleton_pool(spec, len(slice_names))
    models = []
    for m in skeleton.models:
        p, b = build_capability_profile(calibration_traces, skeleton, m.model_id, slice_names)
        models.append(
            ModelDescriptor(
                model_id=m.model_id, cost=m.cost, latency=m.latency, profile=p, pairwise=b
            )
        )
    return ModelPool(models=tuple(models), canonical_order=spec.model_ids)
