"""Command-line entry point: reproducible generate/train/evaluate runs.

Every command reads one JSON config, writes its outputs plus a resolved
copy of the config into --out, and is bitwise reproducible for a fixed
seed list. Exit codes: 0 success, 1 validation failure, 2 missing
artifact, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .dataio import assemble_pool, load_pool_spec, load_traces, save_pool_spec, save_traces
from .domain import ValidationError, descriptor_dim, validate_dataset
from .evaluation import (
    LatentRouterPolicy,
    cold_start_eval,
    collect_scores,
    cost_quality_frontier,
    default_lambda_grid,
    evaluate_policy,
    latency_probe,
    make_baseline,
    nauc,
    pool_change_eval,
    ranking_metrics,
    write_eval_csv,
    write_frontier_csv,
    POOL_SCENARIOS,
)
from .network import (
    ConfigError,
    RouterConfig,
    RouterParams,
    load_checkpoint,
    save_checkpoint,
)
from .synth import GeneratorConfig, GeneratorError, generate_dataset, save_ground_truth
from .tensor import NumericError, Tape, backward
from .training import LossWeights, TrainConfig, TrainingError, total_loss, train

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_MISSING = 2
EXIT_NUMERIC = 3


class ConfigFieldError(ValueError):
    """Configuration problem, reported with its JSON field path."""


def _build_section(cls, section: dict, path: str):
    valid = {f.name for f in fields(cls)}
    for key in section:
        if key not in valid:
            raise ConfigFieldError(f"{path}.{key}: unknown field")
    kwargs = dict(section)
    if cls is GeneratorConfig and "split_ratios" in kwargs:
        kwargs["split_ratios"] = tuple(kwargs["split_ratios"])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError, GeneratorError, ConfigError) as e:
        raise ConfigFieldError(f"{path}: {e}") from None


class RunSpec:
    """Resolved run configuration: all sections plus seeds and lambda settings."""

    def __init__(self, doc: dict):
        known = {"generator", "router", "train", "loss_weights", "seeds", "lambda_train", "lambda_eval", "lambda_grid"}
        for key in doc:
            if key not in known:
                raise ConfigFieldError(f"{key}: unknown top-level field")
        self.generator: GeneratorConfig = _build_section(
            GeneratorConfig, doc.get("generator", {}), "generator"
        )
        router_section = dict(doc.get("router", {}))
        router_section.setdefault("d_v", self.generator.token_dim)
        router_section.setdefault("d_q", self.generator.token_dim)
        router_section.setdefault(
            "descriptor_dim",
            descriptor_dim(self.generator.slice_count, self.generator.pool_size),
        )
        if not router_section.get("use_descriptor_tokens", True):
            router_section.setdefault("pool_size", self.generator.pool_size)
        self.router: RouterConfig = _build_section(RouterConfig, router_section, "router")
        self.train: TrainConfig = _build_section(TrainConfig, doc.get("train", {}), "train")
        self.loss_weights: LossWeights = _build_section(
            LossWeights, doc.get("loss_weights", {}), "loss_weights"
        )
        self.seeds: list[int] = list(doc.get("seeds", [0, 1, 2]))
        if not self.seeds:
            raise ConfigFieldError("seeds: must be non-empty")
        self.lambda_train: float = float(doc.get("lambda_train", 0.0))
        self.lambda_eval: float = float(doc.get("lambda_eval", 0.0))
        grid = doc.get("lambda_grid")
        self.lambda_grid = None if grid is None else [float(v) for v in grid]

    def to_doc(self) -> dict:
        return {
            "generator": asdict(self.generator),
            "router": asdict(self.router),
            "train": asdict(self.train),
            "loss_weights": asdict(self.loss_weights),
            "seeds": self.seeds,
            "lambda_train": self.lambda_train,
            "lambda_eval": self.lambda_eval,
            "lambda_grid": self.lambda_grid,
        }


def load_run_spec(path: str | Path) -> RunSpec:
    with open(path, encoding="utf-8") as f:
        return RunSpec(json.load(f))


def _write_resolved(spec: RunSpec, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "resolved_config.json", "w", encoding="utf-8") as f:
        json.dump(spec.to_doc(), f, indent=2, sort_keys=True)


def eval_workers() -> int:
    """Evaluation parallelism cap from LATENT_ROUTER_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("LATENT_ROUTER_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# dataset plumbing
# ---------------------------------------------------------------------------

DATA_FILES = ("train.jsonl", "val.jsonl", "test.jsonl", "pool.json", "ground_truth.json")


def _data_dir(out: Path) -> Path:
    return out / "data"


def _generate_into(spec: RunSpec, out: Path) -> None:
    data = _data_dir(out)
    data.mkdir(parents=True, exist_ok=True)
    pool_spec, train_tr, val_tr, test_tr, truth, report = generate_dataset(spec.generator)
    save_traces(data / "train.jsonl", train_tr)
    save_traces(data / "val.jsonl", val_tr)
    save_traces(data / "test.jsonl", test_tr)
    save_pool_spec(data / "pool.json", pool_spec)
    save_ground_truth(data / "ground_truth.json", truth, spec.generator)
    with open(data / "reversal_report.json", "w", encoding="utf-8") as f:
        json.dump(
            {
                "n_test": report.n_test,
                "first_better": report.first_better,
                "second_better": report.second_better,
                "reversal_count": report.reversal_count,
            },
            f,
            indent=2,
        )


def _load_dataset(spec: RunSpec, out: Path):
    data = _data_dir(out)
    for name in ("train.jsonl", "val.jsonl", "test.jsonl", "pool.json"):
        if not (data / name).exists():
            raise FileNotFoundError(f"missing dataset artifact {data / name}; run gen-data first")
    train_tr = load_traces(data / "train.jsonl")
    val_tr = load_traces(data / "val.jsonl")
    test_tr = load_traces(data / "test.jsonl")
    pool_spec = load_pool_spec(data / "pool.json")
    pool = assemble_pool(pool_spec, train_tr, spec.generator.slice_names)
    report = validate_dataset({"train": train_tr, "val": val_tr, "test": test_tr}, pool)
    if not report.ok():
        raise ValidationError(f"dataset validation failed: {report.first_violation}")
    return train_tr, val_tr, test_tr, pool


def _checkpoint_path(out: Path, seed: int) -> Path:
    return out / f"seed_{seed}" / "checkpoint.json"


def _train_one(spec: RunSpec, out: Path, seed: int, router_cfg: RouterConfig | None = None,
               data=None):
    train_tr, val_tr, test_tr, pool = data or _load_dataset(spec, out)
    cfg = router_cfg or spec.router
    tcfg = TrainConfig(**{**asdict(spec.train), "seed": seed})
    params, report = train(train_tr, val_tr, pool, cfg, tcfg, spec.loss_weights, spec.lambda_train)
    seed_dir = out / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(
        seed_dir / "checkpoint.json", params, cfg, seed,
        training_meta={"best_epoch": report.best_epoch, "lambda_train": spec.lambda_train},
    )
    report.to_csv(seed_dir / "train_report.csv")
    return params, cfg, pool


def _load_policy(out: Path, seed: int, pool) -> LatentRouterPolicy:
    path = _checkpoint_path(out, seed)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}; run train first")
    params, cfg, _ = load_checkpoint(path)
    return LatentRouterPolicy(params, cfg, pool)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = load_run_spec(args.config)
    out = Path(args.out)
    _write_resolved(spec, out)
    _generate_into(spec, out)
    print(f"dataset written to {_data_dir(out)}")
    return EXIT_OK


def cmd_train(args) -> int:
    spec = load_run_spec(args.config)
    out = Path(args.out)
    _write_resolved(spec, out)
    seeds = [args.seed] if args.seed is not None else spec.seeds
    data = _load_dataset(spec, out)
    for seed in seeds:
        _train_one(spec, out, seed, data=data)
        print(f"checkpoint written to {_checkpoint_path(out, seed)}")
    return EXIT_OK


def _baseline_policies(spec: RunSpec, pool, train_tr, val_tr, test_tr, seed: int):
    policies = [
        make_baseline("oracle", pool, train_tr, val_traces=val_tr, test_traces=test_tr, seed=seed),
        make_baseline("strongest", pool, train_tr, val_traces=val_tr, seed=seed),
        make_baseline("cheapest", pool, train_tr, seed=seed),
        make_baseline("random", pool, train_tr, seed=seed),
        make_baseline("knn", pool, train_tr, seed=seed),
        make_baseline("additive", pool, train_tr, seed=seed),
    ]
    return policies


def cmd_eval(args) -> int:
    spec = load_run_spec(args.config)
    out = Path(args.out)
    _write_resolved(spec, out)
    lam = spec.lambda_eval if args.lam is None else args.lam
    train_tr, val_tr, test_tr, pool = _load_dataset(spec, out)
    seeds = [args.seed] if args.seed is not None else spec.seeds
    workers = eval_workers()
    rows = []
    for seed in seeds:
        policies = _baseline_policies(spec, pool, train_tr, val_tr, test_tr, seed)
        policies.append(_load_policy(out, seed, pool))
        for pol in policies:
            res = evaluate_policy(pol, test_tr, pool, lam, workers=workers)
            row = {
                "policy": pol.name,
                "scenario": f"seed_{seed}",
                "lambda": lam,
                "selected_quality": res.selected_quality,
                "oracle_regret": res.oracle_regret,
                "n_traces": res.n_traces,
            }
            if pol.name in ("latent_router", "knn", "additive"):
                metrics = ranking_metrics(collect_scores(pol, test_tr, lam, workers=workers), test_tr)
                row.update(
                    mse=metrics.mse,
                    ndcg=metrics.ndcg,
                    spearman=metrics.spearman,
                    top3_recall=metrics.top3_recall,
                )
            if args.latency:
                # wall-clock values are inherently non-reproducible, so this
                # column stays empty unless explicitly requested
                stats = latency_probe(pol, test_tr[: min(200, len(test_tr))], repeats=1, lam=lam)
                row["latency_ms"] = stats.mean_ms
            rows.append(row)
    write_eval_csv(out / "eval.csv", rows)
    print(f"evaluation written to {out / 'eval.csv'}")
    return EXIT_OK


def _frontier_svg(path: Path, frontiers: dict) -> None:
    """Minimal SVG line chart: avg_cost on x, avg_quality on y."""
    width, height, pad = 640, 440, 50
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]
    all_pts = [p for pts in frontiers.values() for p in pts]
    if not all_pts:
        return
    x_lo, x_hi = min(p.avg_cost for p in all_pts), max(p.avg_cost for p in all_pts)
    y_lo, y_hi = min(p.avg_quality for p in all_pts), max(p.avg_quality for p in all_pts)
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0

    def sx(x):
        return pad + (x - x_lo) / x_span * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y_lo) / y_span * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height-pad}" x2="{width-pad}" y2="{height-pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height-pad}" stroke="black"/>',
        f'<text x="{width//2}" y="{height-12}" font-size="12">average cost</text>',
        f'<text x="14" y="{height//2}" font-size="12" transform="rotate(-90 14 {height//2})">average quality</text>',
    ]
    for i, (name, pts) in enumerate(sorted(frontiers.items())):
        color = colors[i % len(colors)]
        pts = sorted(pts, key=lambda p: p.avg_cost)
        coords = " ".join(f"{sx(p.avg_cost):.1f},{sy(p.avg_quality):.1f}" for p in pts)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{width-pad-120}" y="{pad + 14*i}" font-size="11" fill="{color}">{name}</text>')
    parts.append("</svg>")
    path.write_text("\n".join(parts), encoding="utf-8")


def cmd_frontier(args) -> int:
    spec = load_run_spec(args.config)
    out = Path(args.out)
    _write_resolved(spec, out)
    train_tr, val_tr, test_tr, pool = _load_dataset(spec, out)
    grid = spec.lambda_grid if spec.lambda_grid is not None else default_lambda_grid()
    seeds = [args.seed] if args.seed is not None else spec.seeds
    workers = eval_workers()
    frontiers = {}
    nauc_rows = []
    for seed in seeds:
        policies = _baseline_policies(spec, pool, train_tr, val_tr, test_tr, seed)
        policies.append(_load_policy(out, seed, pool))
        oracle_pts = None
        per_policy = {}
        for pol in policies:
            pts = cost_quality_frontier(pol, test_tr, pool, grid, workers=workers)
            per_policy[pol.name] = pts
            if pol.name == "oracle":
                oracle_pts = pts
        for name, pts in per_policy.items():
            frontiers[f"{name}_seed{seed}"] = pts
            nauc_rows.append(
                {
                    "policy": name,
                    "scenario": f"seed_{seed}",
                    "lambda": -1.0,
                    "nauc": nauc(pts, oracle_pts),
                    "n_traces": len(test_tr),
                }
            )
    write_frontier_csv(out / "frontier.csv", frontiers)
    write_eval_csv(out / "nauc.csv", nauc_rows)
    _frontier_svg(out / "frontier.svg", frontiers)
    print(f"frontier written to {out / 'frontier.csv'}")
    return EXIT_OK


ABLATION_VARIANTS = (
    "full",
    "wo_capsules",
    "wo_model_tokens",
    "wo_communication",
    "wo_distributional",
    "wo_correction",
)


def _variant_config(base: RouterConfig, variant: str, pool_size: int) -> RouterConfig:
    doc = asdict(base)
    if variant == "full":
        pass
    elif variant == "wo_capsules":
        doc["use_capsules"] = False
    elif variant == "wo_model_tokens":
        doc["use_descriptor_tokens"] = False
        doc["pool_size"] = pool_size
    elif variant == "wo_communication":
        doc["comm_layers"] = 0
    elif variant == "wo_distributional":
        doc["distributional_head"] = False
    elif variant == "wo_correction":
        doc["correction_bound"] = 0.0
    elif variant.startswith("H="):
        doc["comm_layers"] = int(variant[2:])
    elif variant.startswith("C="):
        doc["capsule_count"] = int(variant[2:])
    else:
        raise ValueError(f"unknown ablation variant {variant!r}")
    return RouterConfig(**doc)


def cmd_ablate(args) -> int:
    spec = load_run_spec(args.config)
    out = Path(args.out)
    _write_resolved(spec, out)
    data = _load_dataset(spec, out)
    train_tr, val_tr, test_tr, pool = data
    lam = spec.lambda_eval if args.lam is None else args.lam
    variants = list(ABLATION_VARIANTS) + [f"H={h}" for h in (0, 1, 2, 3, 4)] + [
        f"C={c}" for c in (1, 4, 7, 12)
    ]
    seeds = [args.seed] if args.seed is not None else spec.seeds
    rows = []
    for variant in variants:
        cfg = _variant_config(spec.router, variant, pool.size)
        for seed in seeds:
            tcfg = TrainConfig(**{**asdict(spec.train), "seed": seed})
            params, _ = train(train_tr, val_tr, pool, cfg, tcfg, spec.loss_weights, spec.lambda_train)
            pol = LatentRouterPolicy(params, cfg, pool, name=variant)
            res = evaluate_policy(pol, test_tr, pool, lam)
            rows.append(
                {
                    "policy": variant,
                    "scenario": f"seed_{seed}",
                    "lambda": lam,
                    "selected_quality": res.selected_quality,
                    "oracle_regret": res.oracle_regret,
                    "n_traces": res.n_traces,
                }
            )
            print(f"ablate {variant} seed {seed}: quality {res.selected_quality:.4f}")
    write_eval_csv(out / "ablate.csv", rows)
    return EXIT_OK


def cmd_pool_robustness(args) -> int:
    spec = load_run_spec(args.config)
    out = Path(args.out)
    _write_resolved(spec, out)
    train_tr, val_tr, test_tr, pool = _load_dataset(spec, out)
    lam = spec.lambda_eval if args.lam is None else args.lam
    scenarios = [args.scenario] if args.scenario else list(POOL_SCENARIOS)
    seeds = [args.seed] if args.seed is not None else spec.seeds
    rows = []
    for seed in seeds:
        pol = _load_policy(out, seed, pool)
        for scenario in scenarios:
            res = pool_change_eval(pol, test_tr, pool, scenario, lam, calib=val_tr, seed=seed)
            rows.append(
                {
                    "policy": pol.name,
                    "scenario": f"{scenario}/seed_{seed}",
                    "lambda": lam,
                    "selected_quality": res.evaluation.selected_quality,
                    "oracle_regret": res.evaluation.oracle_regret,
                    "n_traces": res.evaluation.n_traces,
                }
            )
    write_eval_csv(out / "pool_robustness.csv", rows)
    print(f"pool robustness written to {out / 'pool_robustness.csv'}")
    return EXIT_OK


def cmd_cold_start(args) -> int:
    spec = load_run_spec(args.config)
    out = Path(args.out)
    _write_resolved(spec, out)
    train_tr, val_tr, test_tr, pool = _load_dataset(spec, out)
    held = args.held_out
    if held is None:
        from .evaluation import _strongest_index

        held = pool.canonical_order[_strongest_index(val_tr, pool, 0.0)]
    seeds = [args.seed] if args.seed is not None else spec.seeds
    rows = []
    for seed in seeds:
        tcfg = TrainConfig(**{**asdict(spec.train), "seed": seed})
        curve = cold_start_eval(
            train_tr, val_tr, test_tr, pool, held, spec.generator.slice_names,
            spec.router, tcfg, spec.loss_weights, lam=spec.lambda_eval,
        )
        for size, quality in curve:
            rows.append(
                {
                    "policy": f"cold_start[{held}]",
                    "scenario": f"k={size}/seed_{seed}",
                    "lambda": spec.lambda_eval,
                    "selected_quality": quality,
                    "n_traces": len(test_tr),
                }
            )
            print(f"cold-start seed {seed} k={size}: quality {quality:.4f}")
    write_eval_csv(out / "cold_start.csv", rows)
    return EXIT_OK


def _grad_check_impl(step: float = 1e-5, tol: float = 1e-4) -> tuple[float, bool]:
    """Finite-difference audit of the full loss on a tiny shipped config."""
    from .domain import descriptor_matrix
    from .network import forward_from_arrays
    from .synth import GeneratorConfig as GC, generate_dataset as gen

    cfg_gen = GC(pool_size=2, queries_n=14, seed=7, availability_drop_rate=0.0)
    pool_spec, train_tr, _, _, _, _ = gen(cfg_gen)
    pool = assemble_pool(pool_spec, train_tr, cfg_gen.slice_names)
    rcfg = RouterConfig(
        d_v=cfg_gen.token_dim,
        d_q=cfg_gen.token_dim,
        descriptor_dim=descriptor_dim(cfg_gen.slice_count, cfg_gen.pool_size),
        capsule_count=2,
        comm_layers=1,
        hidden_dim=8,
    )
    params = RouterParams.initialize(rcfg, seed=3)
    trace = train_tr[0]
    desc = descriptor_matrix(pool)
    costs = pool.costs()
    weights = LossWeights()

    def loss_fn():
        rec = forward_from_arrays(trace.query, desc, costs, trace.omega, params, rcfg, 0.1)
        total, _ = total_loss(rec, trace, costs, weights, 0.1)
        return total

    with Tape() as tape:
        backward(tape, loss_fn())
    worst = 0.0
    for name in params.names():
        block = params[name]
        analytic = block.grad.copy()
        flat = block.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            dn = loss_fn().item()
            flat[i] = orig
            fd = (up - dn) / (2 * step)
            worst = max(worst, abs(analytic.reshape(-1)[i] - fd) / max(1.0, abs(fd)))
    return worst, worst < tol


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="latent-router", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **extra):
        p = sub.add_parser(name)
        p.add_argument("--config", required=extra.get("config", True))
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--lambda", dest="lam", type=float, default=None)
        p.add_argument("--scenario", default=None)
        if name == "cold-start":
            p.add_argument("--held-out", default=None)
        if name == "eval":
            p.add_argument("--latency", action="store_true")
        p.set_defaults(fn=fn)
        return p

    add("gen-data", cmd_gen_data)
    add("train", cmd_train)
    add("eval", cmd_eval)
    add("frontier", cmd_frontier)
    add("ablate", cmd_ablate)
    add("pool-robustness", cmd_pool_robustness)
    add("cold-start", cmd_cold_start)

    p_grad = sub.add_parser("grad-check")
    p_grad.add_argument("--step", type=float, default=1e-5)
    p_grad.add_argument("--tol", type=float, default=1e-4)
    p_grad.set_defaults(fn=None)

    p_report = sub.add_parser("report")
    p_report.add_argument("--out", required=True)
    p_report.set_defaults(fn=None)

    args = parser.parse_args(argv)

    try:
        if args.command == "grad-check":
            worst, ok = _grad_check_impl(args.step, args.tol)
            print(f"grad-check max relative error: {worst:.3e} (tolerance {args.tol})")
            return EXIT_OK if ok else EXIT_NUMERIC
        if args.command == "report":
            return cmd_report(args)
        return args.fn(args)
    except ConfigFieldError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ValidationError, GeneratorError, ConfigError, ValueError) as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingError, NumericError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


def cmd_report(args) -> int:
    """Aggregate all eval-style CSVs in --out into one mean +/- std summary."""
    out = Path(args.out)
    sources = [
        p for p in ("eval.csv", "nauc.csv", "ablate.csv", "pool_robustness.csv", "cold_start.csv")
        if (out / p).exists()
    ]
    if not sources:
        raise FileNotFoundError(f"no evaluation CSVs found in {out}")
    groups: dict[tuple, dict[str, list[float]]] = {}
    for src in sources:
        with open(out / src, newline="", encoding="utf-8") as f:
            for row in csv.DictReader(f):
                scenario = row.get("scenario", "")
                base_scenario = scenario.split("/seed_")[0] if "/seed_" in scenario else (
                    "" if scenario.startswith("seed_") else scenario
                )
                key = (src, row["policy"], base_scenario)
                bucket = groups.setdefault(key, {})
                for metric in ("selected_quality", "oracle_regret", "nauc", "mse", "ndcg",
                               "spearman", "top3_recall", "latency_ms"):
                    val = row.get(metric)
                    if val:
                        try:
                            bucket.setdefault(metric, []).append(float(val))
                        except ValueError:
                            pass
    summary_path = out / "summary.csv"
    with open(summary_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["source", "policy", "scenario", "metric", "mean", "std", "n_seeds"])
        for (src, policy, scenario), metrics in sorted(groups.items()):
            for metric, vals in sorted(metrics.items()):
                arr = np.array(vals)
                std = arr.std(ddof=1) if len(arr) > 1 else 0.0
                w.writerow([src, policy, scenario, metric, repr(float(arr.mean())), repr(float(std)), len(arr)])
                print(f"{src} {policy} {scenario or '-'} {metric}: {arr.mean():.4f} +/- {std:.4f} (n={len(arr)})")
    print(f"summary written to {summary_path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
