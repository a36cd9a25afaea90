#!/usr/bin/env python3
"""
Command-line entry point.

    python cli.py <command> --config configs/micro.json [--out DIR] [--seed S] ...

Commands: gen-data, label, train, calibrate, solve, solve-assisted,
benchmark, interval-study, inspect. Every command writes manifest.json into the output
directory and exits nonzero when its stage fails.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from artifacts import describe_artifact, write_json, write_manifest
from config import ConfigError, RunConfig, build_factory, load_config
from grid import bus_topology, validate_radial
from mipcore import build_model, check_feasible, save_solution, solve
from pipeline import (benchmark, estimate_labelling_time, evaluate_predictions, generate_labelled_dataset,
                      infer_and_solve, interval_study, load_dataset, measure_solve_times, padding_ablation,
                      sample_seeds, save_dataset)
from reports import interval_table, write_benchmark_report, write_interval_report
from scenariogen import load_instance, save_instance
from surrogate import (Thresholds, calibrate_thresholds, load_model, save_model, split_indices, train)
from topology import tsn_summary

logger = logging.getLogger(__name__)

COMMANDS = ("gen-data", "label", "train", "calibrate", "solve", "solve-assisted", "benchmark", "interval-study",
            "inspect")
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
TEST_STREAM = 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evjrs", description="EV joint routing and scheduling toolkit")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="run config JSON (merged over the defaults)")
    parser.add_argument("--workers", type=int, help="parallel labelling workers")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--gap", type=float, help="relative MIP gap")
    parser.add_argument("--timeout", type=float, help="solver time limit in seconds")
    parser.add_argument("--instance", help="instance JSON file, or a directory of them for benchmark")
    parser.add_argument("--dataset", help="labelled dataset (.npz)")
    parser.add_argument("--model", help="surrogate model file")
    parser.add_argument("--thresholds", help="thresholds JSON")
    parser.add_argument("--evs", type=int, help="EV count for a freshly sampled instance")
    parser.add_argument("--target", default="network",
                        choices=("network", "instance", "dataset", "model", "report"),
                        help="what inspect describes")
    parser.add_argument("--log-level", default="INFO", help="logging level (default INFO)")
    return parser


def _arg(args, name):
    return getattr(args, name, None) if args is not None else None


def _banner(title: str) -> None:
    print("=" * 60)
    print(title)
    print("=" * 60)


def _dataset_path(cfg: RunConfig, args) -> Path:
    return Path(_arg(args, "dataset") or cfg.out_dir / "dataset.npz")


def _model_path(cfg: RunConfig, args) -> Path:
    return Path(_arg(args, "model") or cfg.out_dir / "model.pt")


def _load_thresholds(cfg: RunConfig, args, model) -> Thresholds:
    path = _arg(args, "thresholds")
    if path is None and (cfg.out_dir / "thresholds.json").exists():
        path = cfg.out_dir / "thresholds.json"
    if path is not None:
        with open(path, "r") as f:
            data = json.load(f)
        return Thresholds(float(data["p0"]), float(data["p1"]))
    if model.thresholds is None:
        raise ValueError("no thresholds: run calibrate first or pass --thresholds")
    return model.thresholds


def _test_instances(cfg: RunConfig, factory=None) -> list:
    factory = factory or build_factory(cfg)
    test = cfg.section("test_set")
    counts = [int(e) for e in test["ev_counts"]]
    per_count = int(test["samples_per_count"])
    seeds = sample_seeds(cfg.seed, len(counts) * per_count, stream=TEST_STREAM)
    scenarios = int(cfg.get("scenarios.count"))
    return [factory.make_instance(evs, scenarios, seeds[i * per_count + j], name=f"test-ev{evs}-{j:03d}")
            for i, evs in enumerate(counts) for j in range(per_count)]


def _single_instance(cfg: RunConfig, args):
    path = _arg(args, "instance")
    if path:
        return load_instance(path)
    evs = _arg(args, "evs") or int(cfg.get("test_set.ev_counts")[0])
    return build_factory(cfg).make_instance(evs, int(cfg.get("scenarios.count")), cfg.seed,
                                            name=f"{cfg.get('name')}-ev{evs}")


# ---------------------------------------------------------------------------
# Stage handlers: each returns {'success': bool, 'error': str, 'artifacts': [(path, category)]}
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args) -> dict:
    instances = _test_instances(cfg)
    folder = cfg.out_dir / "instances"
    written = [(save_instance(folder / f"{inst.name}.json", inst), "instance") for inst in instances]
    print(f"Wrote {len(written)} instances to {folder}")
    return {"success": True, "artifacts": written}


def cmd_label(cfg: RunConfig, args) -> dict:
    dataset_cfg = cfg.dataset_config()
    factory = build_factory(cfg)
    dataset = generate_labelled_dataset(factory, dataset_cfg)
    path = save_dataset(_dataset_path(cfg, args), dataset)
    times = pd.DataFrame({"evs": dataset.evs, "solve_seconds": dataset.solve_seconds, "status": dataset.statuses})
    times_path = cfg.out_dir / "solve_times.csv"
    times.to_csv(times_path, index=False)

    means = times.groupby("evs")["solve_seconds"].mean()
    counts = times.groupby("evs")["solve_seconds"].count()
    # the ablation prices one model per EV count 1..e_max, so every count is timed
    measured = measure_solve_times(factory, range(1, dataset_cfg.e_max + 1), int(cfg.get("dataset.timing_samples", 1)),
                                   dataset_cfg.solver, seed=cfg.seed)
    summary = {
        "samples": len(dataset),
        "dropped": dataset.dropped,
        "labelling_hours": estimate_labelling_time(counts.to_numpy(), means.to_numpy()),
        "mean_seconds_per_count": {str(k): float(v) for k, v in means.items()},
        "measured_seconds_per_count": {str(k): v for k, v in measured.items()},
        "padding_ablation": padding_ablation(nonpad_samples=dataset_cfg.samples_per_count, pad_samples=len(dataset),
                                             mean_seconds=[measured[e] for e in sorted(measured)]),
    }
    summary_path = write_json(cfg.out_dir / "labelling.json", summary)
    print(f"Labelled {len(dataset)} samples ({dataset.dropped} dropped), d_ev={dataset.d_ev}, "
          f"e_max={dataset.e_max}")
    return {"success": True, "artifacts": [(path, "dataset"), (times_path, "solve-times"),
                                           (summary_path, "labelling")]}


def cmd_train(cfg: RunConfig, args) -> dict:
    dataset = load_dataset(_dataset_path(cfg, args))
    train_cfg = cfg.train_config()
    model = train(dataset.maps(), dataset.labels, dataset.d_ev, train_cfg)
    _, val_idx = split_indices(len(dataset), train_cfg.val_fraction, train_cfg.seed)
    metrics = {}
    if len(val_idx):
        try:
            metrics = evaluate_predictions(model, dataset.subset(val_idx))
        except ValueError as exc:
            logger.warning("Validation metrics unavailable: %s", exc)
    path = save_model(_model_path(cfg, args), model)
    info_path = write_json(cfg.out_dir / "training.json", {"history": model.history, "validation": metrics})
    print(f"Trained on {len(dataset)} samples; validation metrics: "
          + (", ".join(f"{k}={v:.2f}" for k, v in metrics.items()) or "n/a"))
    return {"success": True, "artifacts": [(path, "model"), (info_path, "training")]}


def cmd_calibrate(cfg: RunConfig, args) -> dict:
    dataset = load_dataset(_dataset_path(cfg, args))
    model = load_model(_model_path(cfg, args))
    train_cfg = cfg.train_config()
    _, val_idx = split_indices(len(dataset), train_cfg.val_fraction, train_cfg.seed)
    calib = dataset.subset(val_idx) if len(val_idx) else dataset
    thresholds = calibrate_thresholds(model, calib.maps(), calib.labels)
    model.thresholds = thresholds
    model_path = save_model(_model_path(cfg, args), model)
    path = write_json(Path(_arg(args, "thresholds") or cfg.out_dir / "thresholds.json"),
                      {"p0": thresholds.p0, "p1": thresholds.p1})
    print(f"Thresholds: p0={thresholds.p0:.4f} p1={thresholds.p1:.4f}")
    return {"success": True, "artifacts": [(path, "thresholds"), (model_path, "model")]}


def _report_solution(instance, solution) -> None:
    print(f"Instance: {instance.name} ({instance.n_evs} EVs, {instance.n_scenarios} scenarios)")
    print(f"Status: {solution.status}")
    if solution.objective is not None:
        print(f"Objective: {solution.objective:.6f}")
    print(f"Solve time: {solution.solve_seconds:.2f} s")
    if solution.feasible:
        report = check_feasible(instance, solution)
        family, worst = report.worst()
        print(f"Feasibility check: {'pass' if report.ok else 'FAIL'} (worst {family}={worst:.2e})")


def cmd_solve(cfg: RunConfig, args) -> dict:
    instance = _single_instance(cfg, args)
    model, index = build_model(instance, "stochastic")
    solution = solve(model, params=cfg.solver_params())
    _report_solution(instance, solution)
    path = save_solution(cfg.out_dir / "solution.json", solution, index)
    if solution.status == "error":
        return {"success": False, "error": f"solver error: {solution.message}", "artifacts": [(path, "solution")]}
    return {"success": True, "artifacts": [(path, "solution")]}


def cmd_solve_assisted(cfg: RunConfig, args) -> dict:
    instance = _single_instance(cfg, args)
    model = load_model(_model_path(cfg, args))
    thresholds = _load_thresholds(cfg, args, model)
    solution, stats = infer_and_solve(instance, model, thresholds, params=cfg.solver_params(),
                                      retry=cfg.retry_config())
    _report_solution(instance, solution)
    print(f"Attempts: {stats.attempts}, fixed: {stats.fixed_counts}, fallback: {stats.fallback_used}")
    _, index = build_model(instance, "stochastic")
    path = save_solution(cfg.out_dir / "solution_assisted.json", solution, index)
    stats_path = write_json(cfg.out_dir / "assist.json", {
        "attempts": stats.attempts, "fixed_counts": stats.fixed_counts, "thresholds_used": stats.thresholds_used,
        "statuses": stats.statuses, "assisted_feasible": stats.assisted_feasible,
        "fallback_used": stats.fallback_used})
    if solution.status == "error":
        return {"success": False, "error": f"solver error: {solution.message}",
                "artifacts": [(path, "solution"), (stats_path, "assist")]}
    return {"success": True, "artifacts": [(path, "solution"), (stats_path, "assist")]}


def cmd_benchmark(cfg: RunConfig, args) -> dict:
    source = Path(_arg(args, "instance") or cfg.out_dir / "instances")
    if source.is_dir() and any(source.glob("*.json")):
        instances = [load_instance(p) for p in sorted(source.glob("*.json"))]
    elif source.is_file():
        instances = [load_instance(source)]
    else:
        instances = _test_instances(cfg)
    model = load_model(_model_path(cfg, args))
    thresholds = _load_thresholds(cfg, args, model)

    metrics = {}
    dataset_path = _dataset_path(cfg, args)
    if dataset_path.exists():
        dataset = load_dataset(dataset_path)
        _, val_idx = split_indices(len(dataset), cfg.train_config().val_fraction, cfg.seed)
        try:
            metrics = evaluate_predictions(model, dataset.subset(val_idx) if len(val_idx) else dataset)
        except ValueError as exc:
            logger.warning("Classifier metrics unavailable: %s", exc)

    report = benchmark(instances, model, thresholds, params=cfg.solver_params(), retry=cfg.retry_config(),
                       metrics=metrics)
    paths = write_benchmark_report(report, cfg.out_dir / "benchmark")
    _banner("Benchmark summary")
    for key, value in report.summary.items():
        print(f"{key}: {value:.4f}" if isinstance(value, float) else f"{key}: {value}")
    return {"success": True, "artifacts": [(p, f"benchmark-{k}") for k, p in paths.items()]}


def cmd_interval_study(cfg: RunConfig, args) -> dict:
    factory = build_factory(cfg)
    instances = _test_instances(cfg, factory)
    results = interval_study(factory, instances, cfg.dataset_config(), cfg.interval_study_config(),
                             cfg.train_config(), params=cfg.solver_params(), retry=cfg.retry_config())
    paths = write_interval_report(results, cfg.out_dir / "interval_study")
    _banner("EV-interval study")
    print(interval_table(results).to_string(index=False, float_format=lambda v: f"{v:.2f}"))
    return {"success": True, "artifacts": [(p, f"interval-{k}") for k, p in paths.items()]}


def cmd_inspect(cfg: RunConfig, args) -> dict:
    target = _arg(args, "target") or "network"
    if target == "network":
        factory = build_factory(cfg)
        _banner(f"Transport {factory.transport.name} / grid {factory.grid.network.name}")
        for key, value in tsn_summary(factory.tsn).items():
            print(f"{key}: {value}")
        radial = validate_radial(factory.grid.network)
        upstream, _ = bus_topology(factory.grid.network)
        print(f"buses: {len(factory.grid.network.buses)}, lines: {len(factory.grid.network.lines)}, "
              f"radial: {radial.ok}, fed buses: {len(upstream)}")
        for diagnostic in radial.diagnostics:
            print(f"  {diagnostic}")
    elif target == "instance":
        instance = _single_instance(cfg, args)
        model, _ = build_model(instance, "stochastic")
        _banner(f"Instance {instance.name}")
        print(json.dumps(model.summary(), indent=2, sort_keys=True))
    elif target == "dataset":
        dataset = load_dataset(_dataset_path(cfg, args))
        masks = dataset.masks()
        ones = int(dataset.labels[masks].sum())
        total = int(masks.sum())
        _banner("Dataset")
        print(f"samples: {len(dataset)}, e_max: {dataset.e_max}, d_ev: {dataset.d_ev}")
        print(f"EV counts: {dict(zip(*np.unique(dataset.evs, return_counts=True)))}")
        print(f"class balance: {ones} ones / {total - ones} zeros ({100.0 * ones / max(total, 1):.2f}% ones)")
    elif target == "model":
        model = load_model(_model_path(cfg, args))
        _banner("Surrogate model")
        print(f"e_max: {model.e_max}, d_ev: {model.d_ev}, inputs: {model.in_channels}x{model.timesteps}")
        print(f"layers: {model.spec}")
        print(f"thresholds: {model.thresholds}")
    else:
        with open(cfg.out_dir / "benchmark" / "summary.json", "r") as f:
            summary = json.load(f)
        _banner("Benchmark report")
        for key, value in summary.items():
            print(f"{key}: {value}")
    return {"success": True, "artifacts": []}


HANDLERS = {
    "gen-data": cmd_gen_data,
    "label": cmd_label,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "solve": cmd_solve,
    "solve-assisted": cmd_solve_assisted,
    "benchmark": cmd_benchmark,
    "interval-study": cmd_interval_study,
    "inspect": cmd_inspect,
}


def dispatch(command: str, cfg: RunConfig, args=None) -> dict:
    """Run one stage and write the run manifest; failures come back as {'success': False, 'error': ...}.

    The manifest is written whether the stage succeeds or fails and records
    the outcome under 'status' and 'error'.
    """
    handler = HANDLERS.get(command)
    if handler is None:
        return {"success": False, "error": f"unknown command {command!r}"}
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    result = {"success": False, "error": "stage did not complete", "artifacts": []}
    try:
        result = handler(cfg, args)
    except (ValueError, OSError, KeyError, RuntimeError) as exc:
        logger.debug("Stage %s failed", command, exc_info=True)
        result = {"success": False, "error": f"{type(exc).__name__}: {exc}", "artifacts": []}
    finally:
        artifacts = [describe_artifact(path, category, cfg.out_dir)
                     for path, category in result.get("artifacts", []) if Path(path).exists()]
        seeds = {"seed": cfg.seed, "solver_seed": int(cfg.get("solver.seed", 0))}
        extra = {"status": "success" if result["success"] else "failed", "error": result.get("error")}
        result["manifest"] = write_manifest(cfg.out_dir, command, cfg.digest, seeds, artifacts, extra)
    return result


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO), format=LOG_FORMAT)
    overrides = {"seed": args.seed, "out_dir": args.out, "workers": args.workers,
                 "solver.gap": args.gap, "solver.time_limit": args.timeout}
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"Configuration error: {exc}")
        return 2
    result = dispatch(args.command, cfg, args)
    if not result["success"]:
        print(f"Error: {result['error']}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
