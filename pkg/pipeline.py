#!/usr/bin/env python3
"""
Dataset labelling, the prediction-assisted solve loop and benchmarking.
"""

import itertools
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import linprog

from mipcore import (VOLTAGE_BAND, ModelError, SolverBackend, SolverParams, Solution, VariableIndex, build_model,
                     check_feasible, fix_binaries, solve)
from scenariogen import InstanceFactory, ProblemInstance, SamplePool
from surrogate import (FeatureMap, SurrogateError, SurrogateModel, Thresholds, TrainConfig, bump_threshold,
                       calibrate_thresholds, class_accuracy, encode_features, extract_labels, filter_predictions,
                       mean_average_precision, predict, split_indices, strip_padding, train, valid_mask)
from topology import available_arcs

logger = logging.getLogger(__name__)

DATASET_SCHEMA_VERSION = 1
TIMING_STREAM = 2  # seed stream for solve-time measurement; 0 labels, 1 tests


# ---------------------------------------------------------------------------
# Labelled datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetConfig:
    ev_counts: tuple[int, ...] = (4, 8, 12)
    samples_per_count: int = 50
    e_max: int = 12
    seed: int = 0
    solver: SolverParams = SolverParams()
    workers: int = 1
    # pre-sampled pool sizes (solar, load, schedule sets); None draws per sample
    pool: tuple[int, int, int] | None = None

    def validate(self) -> None:
        if not self.ev_counts or min(self.ev_counts) < 1:
            raise ValueError("ev_counts must list positive EV counts")
        if max(self.ev_counts) > self.e_max:
            raise ValueError(f"EV count {max(self.ev_counts)} exceeds e_max={self.e_max}")
        if self.samples_per_count < 1:
            raise ValueError("samples_per_count must be >= 1")


@dataclass
class LabelledDataset:
    features: np.ndarray  # (N, C, T) raw, unnormalized
    labels: np.ndarray  # (N, e_max * d_ev) int8
    evs: np.ndarray  # (N,)
    solve_seconds: np.ndarray
    statuses: np.ndarray
    objectives: np.ndarray
    e_max: int
    d_ev: int
    buses: int
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.evs)

    def maps(self) -> list[FeatureMap]:
        return [FeatureMap(self.features[i], int(self.evs[i]), self.e_max, self.buses) for i in range(len(self))]

    def masks(self) -> np.ndarray:
        return np.stack([valid_mask(int(e), self.e_max, self.d_ev) for e in self.evs]) if len(self) else \
            np.zeros((0, self.e_max * self.d_ev), dtype=bool)

    def subset(self, idx) -> "LabelledDataset":
        idx = np.asarray(idx, dtype=int)
        return LabelledDataset(self.features[idx], self.labels[idx], self.evs[idx], self.solve_seconds[idx],
                               self.statuses[idx], self.objectives[idx], self.e_max, self.d_ev, self.buses)


def sample_seeds(seed: int, n: int, stream: int = 0) -> list[int]:
    """n independent integer seeds; streams keep labelling and test draws apart."""
    children = np.random.SeedSequence(seed, spawn_key=(stream,)).spawn(n)
    return [int(s.generate_state(1)[0]) for s in children]


def label_instance(instance: ProblemInstance, e_max: int, params: SolverParams,
                   backend: SolverBackend | None = None) -> dict:
    """Solve the deterministic instance and encode it; result dict carries 'success'."""
    model, index = build_model(instance, "deterministic", 0)
    solution = solve(model, backend, params)
    record = {"success": solution.feasible, "status": solution.status, "seconds": solution.solve_seconds,
              "name": instance.name}
    if not solution.feasible:
        record["error"] = f"{instance.name}: {solution.status} {solution.message}".strip()
        return record
    record["objective"] = solution.objective
    record["labels"] = extract_labels(solution, index, instance.n_evs, e_max)
    record["features"] = encode_features(instance.scenarios.pv_max[0], instance.load_p, instance.load_q,
                                         instance.schedule, instance.n_evs, e_max).values
    record["evs"] = instance.n_evs
    record["d_ev"] = index.d_ev
    record["buses"] = len(instance.grid.network.buses)
    return record


def _label_job(job) -> dict:
    source, evs, seed, e_max, params = job
    try:
        instance = source.make_instance(evs, 1, seed)
        return label_instance(instance, e_max, params)
    except ValueError as exc:
        return {"success": False, "error": f"ev{evs}-seed{seed}: {exc}", "status": "error", "seconds": 0.0}


def generate_labelled_dataset(factory: InstanceFactory, cfg: DatasetConfig) -> LabelledDataset:
    """Label cfg.samples_per_count deterministic instances for every EV count."""
    cfg.validate()
    source = factory
    if cfg.pool is not None:
        solar_n, load_n, schedule_sets = cfg.pool
        source = SamplePool.build(factory, solar_n, load_n, schedule_sets, cfg.e_max, cfg.seed)
    seeds = sample_seeds(cfg.seed, len(cfg.ev_counts) * cfg.samples_per_count)
    jobs = [(source, evs, seeds[i * cfg.samples_per_count + j], cfg.e_max, cfg.solver)
            for i, evs in enumerate(cfg.ev_counts) for j in range(cfg.samples_per_count)]
    logger.info("Labelling %d instances (EV counts %s, e_max=%d, %d workers)", len(jobs),
                list(cfg.ev_counts), cfg.e_max, cfg.workers)

    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            records = list(pool.map(_label_job, jobs))
    else:
        records = [_label_job(job) for job in jobs]

    kept = [r for r in records if r["success"]]
    for r in records:
        if not r["success"]:
            logger.warning("Dropped sample %s", r.get("error", r.get("status")))
    if not kept:
        raise ValueError("no sample produced a feasible labelling solution")
    dataset = LabelledDataset(
        features=np.stack([r["features"] for r in kept]),
        labels=np.stack([r["labels"] for r in kept]).astype(np.int8),
        evs=np.array([r["evs"] for r in kept], dtype=int),
        solve_seconds=np.array([r["seconds"] for r in kept], dtype=float),
        statuses=np.array([r["status"] for r in kept]),
        objectives=np.array([r["objective"] for r in kept], dtype=float),
        e_max=cfg.e_max,
        d_ev=kept[0]["d_ev"],
        buses=kept[0]["buses"],
        dropped=len(records) - len(kept),
    )
    logger.info("Labelled %d samples (%d dropped), %.1f s total solve time", len(dataset), dataset.dropped,
                float(dataset.solve_seconds.sum()))
    return dataset


def save_dataset(path: str | Path, dataset: LabelledDataset) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez_compressed(f, schema_version=DATASET_SCHEMA_VERSION, features=dataset.features,
                            labels=dataset.labels, evs=dataset.evs, solve_seconds=dataset.solve_seconds,
                            statuses=dataset.statuses.astype(str), objectives=dataset.objectives,
                            e_max=dataset.e_max, d_ev=dataset.d_ev, buses=dataset.buses, dropped=dataset.dropped)
    return path


def load_dataset(path: str | Path) -> LabelledDataset:
    with np.load(Path(path), allow_pickle=False) as data:
        version = int(data["schema_version"])
        if version != DATASET_SCHEMA_VERSION:
            raise ValueError(f"unsupported dataset schema version {version}")
        return LabelledDataset(
            features=data["features"], labels=data["labels"], evs=data["evs"],
            solve_seconds=data["solve_seconds"], statuses=data["statuses"], objectives=data["objectives"],
            e_max=int(data["e_max"]), d_ev=int(data["d_ev"]), buses=int(data["buses"]),
            dropped=int(data["dropped"]),
        )


def split_dataset(dataset: LabelledDataset, fraction: float = 0.9,
                  seed: int = 0) -> tuple[LabelledDataset, LabelledDataset]:
    """Shuffled (train, validation) split with `fraction` of the samples in train."""
    order = np.random.default_rng(seed).permutation(len(dataset))
    cut = int(round(len(dataset) * fraction))
    return dataset.subset(np.sort(order[:cut])), dataset.subset(np.sort(order[cut:]))


# ---------------------------------------------------------------------------
# Assisted solving
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RetryConfig:
    step: float = 0.1
    max_attempts: int | None = None  # None: until p1 reaches 1.0
    fallback: bool = True


@dataclass
class AssistStats:
    attempts: int = 0
    fixed_counts: list = field(default_factory=list)
    thresholds_used: list = field(default_factory=list)
    statuses: list = field(default_factory=list)
    predict_calls: int = 0
    predict_seconds: float = 0.0
    attempt_seconds: list = field(default_factory=list)
    assisted_feasible: bool = False
    fallback_used: bool = False
    fallback_seconds: float = 0.0

    @property
    def retries(self) -> int:
        return max(0, self.attempts - 1)

    @property
    def assisted_seconds(self) -> float:
        """Prediction plus every assisted attempt."""
        return self.predict_seconds + float(sum(self.attempt_seconds))

    @property
    def attempt_overhead_seconds(self) -> float:
        """Time spent on assisted attempts that did not produce the returned solution."""
        if self.assisted_feasible:
            return float(sum(self.attempt_seconds[:-1]))
        return self.assisted_seconds


def scenario_predictions(instance: ProblemInstance, model: SurrogateModel, stats: AssistStats) -> np.ndarray:
    """Concatenated padding-stripped predictions, one block per scenario."""
    blocks = []
    start = time.perf_counter()
    for sc in range(instance.n_scenarios):
        fm = encode_features(instance.scenarios.pv_max[sc], instance.load_p, instance.load_q,
                             instance.schedule, instance.n_evs, model.e_max)
        probs = predict(model, fm)
        stats.predict_calls += 1
        blocks.append(strip_padding(probs, instance.n_evs, model.d_ev))
    stats.predict_seconds += time.perf_counter() - start
    return np.concatenate(blocks) if blocks else np.zeros(0)


def infer_and_solve(instance: ProblemInstance, model: SurrogateModel, thresholds: Thresholds,
                    backend: SolverBackend | None = None, params: SolverParams | None = None,
                    retry: RetryConfig = RetryConfig()) -> tuple[Solution, AssistStats]:
    """Predict, fix, solve; on infeasibility raise p1 and retry, then fall back to the plain solve."""
    params = params or SolverParams()
    if instance.n_evs > model.e_max:
        raise SurrogateError(f"{instance.n_evs} EVs exceed the model capacity e_max={model.e_max}")
    mip, index = build_model(instance, "stochastic")
    if index.d_ev != model.d_ev:
        raise SurrogateError(f"model stride d_ev={model.d_ev} does not match instance stride {index.d_ev}")

    stats = AssistStats()
    probs = scenario_predictions(instance, model, stats)
    current = thresholds
    solution = None
    while True:
        assignment = filter_predictions(probs, current)
        attempt = solve(fix_binaries(mip, assignment), backend, params)
        stats.attempts += 1
        stats.fixed_counts.append(len(assignment))
        stats.thresholds_used.append(current.p1)
        stats.statuses.append(attempt.status)
        stats.attempt_seconds.append(attempt.solve_seconds)
        logger.info("%s attempt %d: p1=%.4f fixed=%d -> %s", instance.name, stats.attempts, current.p1,
                    len(assignment), attempt.status)
        if attempt.feasible:
            stats.assisted_feasible = True
            solution = attempt
            break
        if attempt.status == "error" or current.p1 >= 1.0:
            break
        if retry.max_attempts is not None and stats.attempts >= retry.max_attempts:
            break
        current = bump_threshold(current, retry.step)

    if solution is None:
        if not retry.fallback:
            return attempt, stats
        logger.warning("%s: assisted solve failed after %d attempts; solving without fixings",
                       instance.name, stats.attempts)
        solution = solve(mip, backend, params)
        stats.fallback_used = True
        stats.fallback_seconds = solution.solve_seconds
    return solution, stats


# ---------------------------------------------------------------------------
# Metrics and benchmark
# ---------------------------------------------------------------------------

def evaluate_predictions(model: SurrogateModel, dataset: LabelledDataset) -> dict:
    """Class accuracies and mAP over the non-padded positions."""
    probs = predict(model, dataset.maps())
    mask = dataset.masks()
    acc0, acc1 = class_accuracy(probs, dataset.labels, mask)
    if math.isnan(acc0) or math.isnan(acc1):
        raise SurrogateError("evaluation labels must contain both classes")
    return {"acc0": 100.0 * acc0, "acc1": 100.0 * acc1,
            "map": 100.0 * mean_average_precision(probs, dataset.labels, mask)}


@dataclass
class BenchmarkRow:
    name: str
    evs: int
    baseline_seconds: float
    assisted_seconds: float
    baseline_objective: float | None
    assisted_objective: float | None
    feasible: bool
    retries: int
    fixed: int = 0
    attempt_overhead_seconds: float = 0.0
    fallback_used: bool = False
    baseline_status: str = ""
    assisted_status: str = ""


@dataclass
class BenchmarkReport:
    rows: list
    summary: dict

    def to_records(self) -> list[dict]:
        return [asdict(r) for r in self.rows]


def summarize_rows(rows: list[BenchmarkRow]) -> dict:
    """Mean time reduction, mean objective gap over feasible rows and feasibility rate (percent)."""
    if not rows:
        return {"samples": 0, "r_bar": float("nan"), "l_bar": float("nan"), "feas": float("nan")}
    reductions, gaps = [], []
    for row in rows:
        # infeasible samples are handed to the baseline: no reduction
        assisted = row.assisted_seconds if row.feasible else row.baseline_seconds
        if row.baseline_seconds > 0:
            reductions.append(100.0 * (row.baseline_seconds - assisted) / row.baseline_seconds)
        else:
            reductions.append(0.0)
        if row.feasible and row.baseline_objective not in (None, 0.0) and row.assisted_objective is not None:
            gaps.append(100.0 * (row.assisted_objective - row.baseline_objective) / row.baseline_objective)
    feasible = sum(1 for row in rows if row.feasible)
    return {
        "samples": len(rows),
        "r_bar": float(np.mean(reductions)),
        "l_bar": float(np.mean(gaps)) if gaps else float("nan"),
        "feas": 100.0 * feasible / len(rows),
        "r_bar_with_overhead": float(np.mean([
            100.0 * (r.baseline_seconds - (r.assisted_seconds if r.feasible
                                           else r.baseline_seconds + r.attempt_overhead_seconds))
            / r.baseline_seconds if r.baseline_seconds > 0 else 0.0 for r in rows])),
    }


def solve_baselines(instances: list[ProblemInstance], backend: SolverBackend | None = None,
                    params: SolverParams | None = None) -> list[Solution]:
    """Plain stochastic solves, reusable across several benchmarked models."""
    return [solve(build_model(instance, "stochastic")[0], backend, params or SolverParams()) for instance in instances]


def benchmark(instances: list[ProblemInstance], model: SurrogateModel, thresholds: Thresholds,
              backend: SolverBackend | None = None, params: SolverParams | None = None,
              retry: RetryConfig = RetryConfig(), metrics: dict | None = None,
              baselines: list[Solution] | None = None) -> BenchmarkReport:
    """Baseline and assisted solves with identical parameters, one row per instance."""
    params = params or SolverParams()
    if baselines is not None and len(baselines) != len(instances):
        raise ValueError(f"{len(baselines)} baseline solutions for {len(instances)} instances")
    rows = []
    for i, instance in enumerate(instances):
        if baselines is not None:
            base = baselines[i]
        else:
            base = solve(build_model(instance, "stochastic")[0], backend, params)
        assisted, stats = infer_and_solve(instance, model, thresholds, backend, params, retry)
        if assisted.feasible and stats.assisted_feasible:
            report = check_feasible(instance, assisted)
            if not report.ok:
                logger.warning("%s: assisted solution violates %s", instance.name, report.failed)
        rows.append(BenchmarkRow(
            name=instance.name, evs=instance.n_evs,
            baseline_seconds=base.solve_seconds, assisted_seconds=stats.assisted_seconds,
            baseline_objective=base.objective,
            assisted_objective=assisted.objective if stats.assisted_feasible else None,
            feasible=stats.assisted_feasible, retries=stats.retries,
            fixed=stats.fixed_counts[-1] if stats.fixed_counts else 0,
            attempt_overhead_seconds=stats.attempt_overhead_seconds, fallback_used=stats.fallback_used,
            baseline_status=base.status, assisted_status=assisted.status,
        ))
        logger.info("%s: baseline %.2fs (%s), assisted %.2fs (%s, %d retries)", instance.name,
                    base.solve_seconds, base.status, stats.assisted_seconds, assisted.status, stats.retries)
    summary = summarize_rows(rows)
    summary["p0"] = thresholds.p0
    summary["p1"] = thresholds.p1
    summary.update(metrics or {})
    return BenchmarkReport(rows, summary)


# ---------------------------------------------------------------------------
# EV-interval study
# ---------------------------------------------------------------------------

def interval_ev_counts(low: int, high: int, interval: int) -> tuple[int, ...]:
    """Multiples of `interval` within [low, high]."""
    if interval < 1 or low > high:
        raise ValueError(f"bad EV interval {interval} over [{low}, {high}]")
    first = -(-low // interval) * interval
    return tuple(range(first, high + 1, interval))


@dataclass(frozen=True)
class IntervalStudyConfig:
    intervals: tuple[int, ...] = (5, 10, 15, 20)
    ev_range: tuple[int, int] = (20, 100)
    samples: int = 800  # per training dataset, spread evenly over its EV counts

    def validate(self, e_max: int) -> None:
        if not self.intervals:
            raise ValueError("interval study needs at least one interval")
        low, high = self.ev_range
        if high > e_max:
            raise ValueError(f"EV range upper bound {high} exceeds e_max={e_max}")
        for interval in self.intervals:
            if not interval_ev_counts(low, high, interval):
                raise ValueError(f"interval {interval} has no EV count within [{low}, {high}]")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")


@dataclass
class IntervalResult:
    interval: int
    ev_counts: tuple[int, ...]
    samples: int
    dropped: int
    thresholds: Thresholds
    metrics: dict
    report: BenchmarkReport

    @property
    def label(self) -> str:
        return f"CNN_{self.interval}"

    def table_row(self) -> dict:
        summary = self.report.summary
        row = {"model": self.label, "interval": self.interval, "samples": self.samples}
        for key in ("acc0", "acc1", "map"):
            row[key] = self.metrics.get(key, float("nan"))
        row["p0"] = 100.0 * self.thresholds.p0
        row["p1"] = 100.0 * self.thresholds.p1
        for key in ("r_bar", "l_bar", "feas"):
            row[key] = summary[key]
        return row


def interval_study(factory: InstanceFactory, test_instances: list[ProblemInstance], dataset_cfg: DatasetConfig,
                   study: IntervalStudyConfig, train_cfg: TrainConfig, backend: SolverBackend | None = None,
                   params: SolverParams | None = None, retry: RetryConfig = RetryConfig()) -> list[IntervalResult]:
    """Label, train, calibrate and benchmark one surrogate per EV-count interval.

    Every model is benchmarked on the same test instances against one shared
    set of baseline solves.
    """
    study.validate(dataset_cfg.e_max)
    params = params or SolverParams()
    low, high = study.ev_range
    seen = set()
    for interval in study.intervals:
        seen.update(interval_ev_counts(low, high, interval))
    overlap = sorted({inst.n_evs for inst in test_instances} & seen)
    if overlap:
        logger.warning("Test EV counts %s also appear in interval training sets", overlap)

    baselines = solve_baselines(test_instances, backend, params)
    results = []
    for interval in study.intervals:
        counts = interval_ev_counts(low, high, interval)
        cfg = replace(dataset_cfg, ev_counts=counts, samples_per_count=max(1, study.samples // len(counts)))
        logger.info("Interval %d: EV counts %s, %d samples each", interval, list(counts), cfg.samples_per_count)
        dataset = generate_labelled_dataset(factory, cfg)
        model = train(dataset.maps(), dataset.labels, dataset.d_ev, train_cfg)
        _, val_idx = split_indices(len(dataset), train_cfg.val_fraction, train_cfg.seed)
        calib = dataset.subset(val_idx) if len(val_idx) else dataset
        thresholds = calibrate_thresholds(model, calib.maps(), calib.labels)
        model.thresholds = thresholds
        try:
            metrics = evaluate_predictions(model, calib)
        except SurrogateError as exc:
            logger.warning("Interval %d: classifier metrics unavailable: %s", interval, exc)
            metrics = {}
        report = benchmark(test_instances, model, thresholds, backend, params, retry, metrics, baselines)
        results.append(IntervalResult(interval, counts, len(dataset), dataset.dropped, thresholds, metrics, report))
    return results


# ---------------------------------------------------------------------------
# Labelling cost
# ---------------------------------------------------------------------------

def measure_solve_times(factory: InstanceFactory, ev_counts, n: int, params: SolverParams | None = None,
                        backend: SolverBackend | None = None, seed: int = 0) -> dict[int, float]:
    """Mean deterministic solve seconds over n random instances for every EV count."""
    if n < 1:
        raise ValueError("n must be >= 1")
    params = params or SolverParams()
    means = {}
    for evs in ev_counts:
        seconds = []
        for draw in sample_seeds(seed, n, stream=TIMING_STREAM):
            try:
                instance = factory.make_instance(int(evs), 1, draw)
            except ValueError as exc:
                logger.warning("Skipping timing draw for %d EVs: %s", evs, exc)
                continue
            seconds.append(solve(build_model(instance, "deterministic", 0)[0], backend, params).solve_seconds)
        if not seconds:
            raise ValueError(f"no timing instance could be generated for {evs} EVs")
        means[int(evs)] = float(np.mean(seconds))
        logger.info("%d EVs: mean solve %.3f s over %d instances", evs, means[int(evs)], n)
    return means


def estimate_labelling_time(counts, mean_seconds) -> float:
    """Total labelling hours for per-configuration sample counts and mean solve seconds."""
    counts = np.atleast_1d(np.asarray(counts, dtype=float))
    means = np.broadcast_to(np.asarray(mean_seconds, dtype=float), counts.shape)
    return float((counts * means).sum() / 3600.0)


def padding_ablation(nonpad_counts: int = 81, nonpad_samples: int = 400, pad_counts: int = 1,
                     pad_samples: int = 800, mean_seconds=3600.0, pad_mean_seconds: float | None = None) -> dict:
    """One model per EV count versus one padded model: total labelling hours and their ratio.

    `mean_seconds` is one mean solve time shared by every configuration, or a
    sequence with one mean per EV count (its length then sets the number of
    per-count models). The padded dataset spreads its samples over the same
    counts, so it is charged the average of those means unless
    `pad_mean_seconds` is given.
    """
    if np.ndim(mean_seconds) == 0:
        means = np.full(nonpad_counts, float(mean_seconds))
    else:
        means = np.asarray(mean_seconds, dtype=float)
        nonpad_counts = means.size
    pad_mean = float(means.mean()) if pad_mean_seconds is None else float(pad_mean_seconds)
    nonpad = estimate_labelling_time([nonpad_samples] * nonpad_counts, means)
    pad = estimate_labelling_time([pad_samples] * pad_counts, pad_mean)
    return {"non_padding_hours": nonpad, "padding_hours": pad, "ratio": nonpad / pad if pad else float("inf"),
            "non_padding_models": int(nonpad_counts), "non_padding_samples": int(nonpad_counts * nonpad_samples),
            "padding_samples": int(pad_counts * pad_samples)}


# ---------------------------------------------------------------------------
# Exhaustive reference solver
# ---------------------------------------------------------------------------

def _routes(instance: ProblemInstance) -> list[list[int]]:
    """Every arc sequence of EV 0 that respects availability, flow and its schedule."""
    tsn = instance.tsn
    pinned = {s: tsn.position_of(node) for k, node, s in instance.schedule.triples if k == 0}
    routes = []

    def extend(position: int, s: int, path: list[int]) -> None:
        if s == tsn.timespan_count:
            routes.append(list(path))
            return
        if s in pinned and pinned[s] != position:
            return
        allowed = available_arcs(tsn, instance.congestion[s])
        for a in tsn.out_arcs[position]:
            if a in allowed:
                path.append(a)
                extend(tsn.arcs[a].target, s + 1, path)
                path.pop()

    starts = [pinned[0]] if 0 in pinned else range(len(tsn.nodes))
    for start in starts:
        extend(start, 0, [])
    return routes


@dataclass
class BruteForceResult:
    objective: float | None
    lps: int
    solution: Solution | None = None  # argmin in the MIP's variable layout


def _dispatch_lp(instance: ProblemInstance, route: list[int], modes: dict, sc: int = 0) -> dict:
    """Continuous LP of one fixed route and charge pattern in scenario sc, written from the instance data alone.

    Columns per timestep: generators (P, Q), PV, the EV's charge and
    discharge power, its energy, line flows (P, Q) and bus voltages.
    `modes` maps a timespan spent at a station to "charge" or "discharge".
    """
    tsn = instance.tsn
    grid = instance.grid
    dn = grid.network
    fleet = instance.fleet
    T = instance.timesteps
    hours = 24.0 / T
    eta = fleet.eta
    gens, pvs, lines = grid.generators, grid.pv_units, dn.lines
    position = dn.bus_position
    stays = {tsn.stationary_arc_of[node]: node for node in instance.stations}

    layout, size = {}, 0
    for name, rows in (("Pg", len(gens)), ("Qg", len(gens)), ("Pv", len(pvs)), ("Pc", 1), ("Pd", 1),
                       ("E", 1), ("Pf", len(lines)), ("Qf", len(lines)), ("V", len(dn.buses))):
        layout[name] = size
        size += rows * T

    def col(name: str, row: int, t: int) -> int:
        return layout[name] + row * T + t

    lb, ub = np.zeros(size), np.zeros(size)
    cost = np.zeros(size)
    for u, gen in enumerate(gens):
        for t in range(T):
            lb[col("Pg", u, t)], ub[col("Pg", u, t)] = gen.p_min, gen.p_max
            lb[col("Qg", u, t)], ub[col("Qg", u, t)] = gen.q_min, gen.q_max
            cost[col("Pg", u, t)] = gen.cost
    for p in range(len(pvs)):
        for t in range(T):
            ub[col("Pv", p, t)] = instance.scenarios.pv_max[sc, p, t]
    station_bus = {}
    for s, mode in modes.items():
        t = s + 1
        station_bus[t] = position[grid.stations.bus_of(stays[route[s]])]
        ub[col("Pc" if mode == "charge" else "Pd", 0, t)] = fleet.p_max[0]
    for t in range(1, T):
        cost[col("Pc", 0, t)] = instance.costs.charge
        cost[col("Pd", 0, t)] = -instance.costs.discharge
    for t in range(T):
        lb[col("E", 0, t)], ub[col("E", 0, t)] = fleet.e_min[0], fleet.e_max[0]
    lb[col("E", 0, 0)] = ub[col("E", 0, 0)] = fleet.e_init[0]
    for line in lines:
        for t in range(T):
            lb[col("Pf", line.id, t)], ub[col("Pf", line.id, t)] = -line.p_max, line.p_max
            lb[col("Qf", line.id, t)], ub[col("Qf", line.id, t)] = -line.q_max, line.q_max
    v_low, v_high = VOLTAGE_BAND
    for b in dn.buses:
        for t in range(T):
            v = col("V", position[b], t)
            if b == dn.slack_bus:
                lb[v] = ub[v] = dn.v_ref
            else:
                lb[v], ub[v] = v_low * dn.v_ref, v_high * dn.v_ref

    rows, rhs = [], []
    moving = [fleet.p_move if a in tsn.nsa else 0.0 for a in route]
    for t in range(1, T):
        rows.append({col("E", 0, t): 1.0, col("E", 0, t - 1): -1.0,
                     col("Pc", 0, t): -hours * (1.0 - eta), col("Pd", 0, t): hours * (1.0 + eta)})
        rhs.append(-hours * (1.0 + eta) * moving[t - 1])
    for b in dn.buses:
        bp = position[b]
        for t in range(T):
            p_row, q_row = {}, {}
            for u, gen in enumerate(gens):
                if gen.bus == b:
                    p_row[col("Pg", u, t)] = 1.0
                    q_row[col("Qg", u, t)] = 1.0
            for p, pv in enumerate(pvs):
                if pv.bus == b:
                    p_row[col("Pv", p, t)] = 1.0
            for line in lines:
                sign = 1.0 if line.down == b else -1.0 if line.up == b else 0.0
                if sign:
                    p_row[col("Pf", line.id, t)] = sign
                    q_row[col("Qf", line.id, t)] = sign
            if station_bus.get(t) == bp:
                p_row[col("Pc", 0, t)] = -1.0
                p_row[col("Pd", 0, t)] = 1.0
            rows += [p_row, q_row]
            rhs += [instance.load_p[bp, t], instance.load_q[bp, t]]
    scale = dn.base_kva * dn.v_ref
    for line in lines:
        for t in range(T):
            rows.append({col("V", position[line.up], t): 1.0, col("V", position[line.down], t): -1.0,
                         col("Pf", line.id, t): -line.r / scale, col("Qf", line.id, t): -line.x / scale})
            rhs.append(0.0)

    a_eq = np.zeros((len(rows), size))
    for r, row in enumerate(rows):
        for c, coef in row.items():
            a_eq[r, c] = coef
    travel = instance.costs.travel * sum(1 for a in route if a in tsn.nsa)
    return {"cost": cost, "a_eq": a_eq, "b_eq": np.asarray(rhs), "bounds": list(zip(lb, ub)),
            "constant": travel, "col": col, "moving": moving, "station_bus": station_bus}


def _scatter(instance: ProblemInstance, index: VariableIndex, values: np.ndarray, sc: int, route: list[int],
             modes: dict, lp: dict, x) -> None:
    """Write one scenario's LP optimum into the MIP's flat variable vector."""
    col = lp["col"]
    tsn = instance.tsn
    grid = instance.grid
    station_of = {node: i for i, node in enumerate(index.stations)}
    for s, a in enumerate(route):
        values[index.routing(sc, 0, a, s)] = 1.0
        t = s + 1
        values[index.var("Pm", sc, 0, t)] = lp["moving"][s]
        if s in modes:
            i = station_of[tsn.nodes[tsn.arcs[a].source].key]
            binary = index.charge(sc, 0, i, t) if modes[s] == "charge" else index.discharge(sc, 0, i, t)
            values[binary] = 1.0
            values[index.var("Pc", sc, 0, i, t)] = x[col("Pc", 0, t)]
            values[index.var("Pd", sc, 0, i, t)] = x[col("Pd", 0, t)]
    position = grid.network.bus_position
    for t in range(instance.timesteps):
        for u in range(len(grid.generators)):
            values[index.var("Pg", sc, u, t)] = x[col("Pg", u, t)]
            values[index.var("Qg", sc, u, t)] = x[col("Qg", u, t)]
        for p in range(len(grid.pv_units)):
            values[index.var("Pv", sc, p, t)] = x[col("Pv", p, t)]
        values[index.var("E", sc, 0, t)] = x[col("E", 0, t)]
        for line in grid.network.lines:
            values[index.var("Pf", sc, line.id, t)] = x[col("Pf", line.id, t)]
            values[index.var("Qf", sc, line.id, t)] = x[col("Qf", line.id, t)]
        for b in grid.network.buses:
            values[index.var("V", sc, position[b], t)] = x[col("V", position[b], t)]


def brute_force_search(instance: ProblemInstance) -> BruteForceResult:
    """Optimum of a one-EV instance by enumerating routes and charge patterns.

    Scenarios share no variables, so each one is enumerated on its own and
    the optimum is their probability-weighted sum. Each pattern's dispatch
    LP is assembled from the instance data, never from the MIP rows, so the
    result is an independent reference for `build_model`.
    """
    if instance.n_evs != 1:
        raise ModelError("brute force handles exactly one EV")
    tsn = instance.tsn
    stays = {tsn.stationary_arc_of[node] for node in instance.stations}
    routes = _routes(instance)
    index = VariableIndex.for_instance(instance)
    values = np.zeros(index.size)
    total, solved = 0.0, 0
    for sc, probability in enumerate(instance.scenarios.probabilities):
        best, best_args = None, None
        for route in routes:
            station_spans = [s for s, a in enumerate(route) if a in stays]
            for pattern in itertools.product((None, "charge", "discharge"), repeat=len(station_spans)):
                modes = {s: m for s, m in zip(station_spans, pattern) if m is not None}
                lp = _dispatch_lp(instance, route, modes, sc)
                result = linprog(lp["cost"], A_eq=lp["a_eq"], b_eq=lp["b_eq"], bounds=lp["bounds"],
                                 method="highs")
                solved += 1
                if result.status != 0:
                    continue
                objective = float(result.fun) + lp["constant"]
                if best is None or objective < best:
                    best = objective
                    best_args = (route, modes, lp, np.asarray(result.x))
        if best is None:
            logger.info("Brute force over %d LPs: scenario %d infeasible", solved, sc)
            return BruteForceResult(None, solved)
        _scatter(instance, index, values, sc, *best_args)
        total += float(probability) * best
    logger.info("Brute force over %d LPs: optimum %s", solved, total)
    return BruteForceResult(total, solved, Solution(values, total, "optimal", 0.0))


def brute_force_optimum(instance: ProblemInstance) -> tuple[float | None, int]:
    """(optimal objective, LPs solved) of a one-EV instance by full enumeration."""
    result = brute_force_search(instance)
    return result.objective, result.lps
