"""
Scenario runner: seeds named RNG streams, wires plant -> metrology -> doe/nnet/control,
checks the per-cycle compute budget and writes CSV/JSON artifacts plus a ledger entry.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

import control
import doe
import nnet
from artifacts import REPORT_SCHEMA_VERSION, parse_cell, read_csv, read_json, write_csv, write_json
from config import TOOLKIT_VERSION, ScenarioConfig
from errors import MoldpilotError, RangeError, ScenarioError
from ledger import ledger_path, record_run
from metrology import BALANCE, ChronogramPlan, average_trace, measure_cycle, schedule, weigh
from plant import (
    PARAM_FIELDS,
    PLANT_MODEL_VERSION,
    QUALITY_FIELDS,
    CycleRecord,
    DisturbanceState,
    PartQuality,
    Plant,
    ProcessParams,
    clamp_to_ranges,
    nominal_quality,
)

logger = logging.getLogger("runtime")


class SeedStreams:
    """Named, independent seed streams derived from one root seed (counter-based: name hash, index)."""

    def __init__(self, root: int):
        self.root = int(root)

    def seed(self, name: str, index: int = 0) -> int:
        seq = np.random.SeedSequence(self.root, spawn_key=(zlib.crc32(name.encode("utf-8")), int(index)))
        return int(seq.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class CycleTiming:
    """Seconds spent per cycle: measurement plan (scheduled), inference and adjustment (wall clock)."""

    cycle_index: int
    measure: float
    inference: float
    adjust: float

    @property
    def total(self) -> float:
        return self.measure + self.inference + self.adjust


@dataclass(frozen=True)
class BudgetResult:
    cycle_index: int
    total: float
    window: float
    passed: bool


def check_budget(timings: Sequence[CycleTiming], idle_window: float) -> list[BudgetResult]:
    """A cycle fails when measurement + inference + adjustment exceeds the idle window."""
    results = [BudgetResult(t.cycle_index, t.total, idle_window, t.total <= idle_window) for t in timings]
    for r in results:
        if not r.passed:
            logger.warning("Cycle %d over budget: %.4f s > %.4f s", r.cycle_index, r.total, r.window)
    return results


@dataclass
class RunReport:
    """Everything a run produced. Every scalar in `traced` is recomputable from its CSV artifact."""

    kind: str
    seed: int
    config: dict[str, Any]
    results: dict[str, Any] = field(default_factory=dict)
    timing: list[dict[str, float]] = field(default_factory=list)
    budget: list[dict[str, Any]] = field(default_factory=list)
    traced: list[dict[str, Any]] = field(default_factory=list)
    artifacts: list[str] = field(default_factory=list)
    toolkit_version: str = TOOLKIT_VERSION
    plant_model_version: str = PLANT_MODEL_VERSION

    def trace(
        self, name: str, artifact: Path, column: str, reduce: str, value: Any, *, rows: tuple[int, int] | None = None
    ) -> Any:
        """Record how `value` is recomputed from `artifact`; returns value so callers can inline it."""
        entry: dict[str, Any] = {"name": name, "artifact": artifact.name, "column": column, "reduce": reduce, "value": value}
        if rows is not None:
            entry["rows"] = list(rows)
        self.traced.append(entry)
        return value

    def as_dict(self) -> dict[str, Any]:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "toolkit_version": self.toolkit_version,
            "plant_model_version": self.plant_model_version,
            "kind": self.kind,
            "seed": self.seed,
            "config": self.config,
            "results": self.results,
            "timing": self.timing,
            "budget": self.budget,
            "traced": self.traced,
            "artifacts": self.artifacts,
        }


Rows = list[dict[str, str]]


def _column(rows: Rows, name: str) -> list[Any]:
    return [parse_cell(r[name]) for r in rows]


def _pair(rows: Rows, spec: str) -> tuple[np.ndarray, np.ndarray]:
    a, b = spec.split("|")
    return np.array(_column(rows, a), dtype=float), np.array(_column(rows, b), dtype=float)


def _pearson(rows: Rows, spec: str) -> float:
    a, b = _pair(rows, spec)
    if np.std(a) == 0 or np.std(b) == 0:
        return 0.0
    return float(np.corrcoef(b, a)[0, 1])


def nrmse(target: np.ndarray, predicted: np.ndarray) -> float:
    """RMS error over the standard deviation of the target."""
    spread = float(np.std(target))
    err = float(np.sqrt(np.mean((np.asarray(predicted) - np.asarray(target)) ** 2)))
    return err / spread if spread > 0 else math.inf


# A paired column spec "a|b" names the target then the prediction.
REDUCERS: dict[str, Callable[[Rows, str], Any]] = {
    "first": lambda rows, c: _column(rows, c)[0],
    "last": lambda rows, c: _column(rows, c)[-1],
    "min": lambda rows, c: min(_column(rows, c)),
    "max": lambda rows, c: max(_column(rows, c)),
    "mean": lambda rows, c: float(np.mean(_column(rows, c))),
    "list": _column,
    "count_true": lambda rows, c: sum(1 for v in _column(rows, c) if v is True),
    "labels_true": lambda rows, c: [r["factor"] for r in rows if parse_cell(r[c]) is True],
    "pearson": _pearson,
    "nrmse": lambda rows, c: nrmse(*_pair(rows, c)),
}


def _matches(expected: Any, recomputed: Any) -> bool:
    if isinstance(expected, list) and isinstance(recomputed, list):
        return len(expected) == len(recomputed) and all(_matches(e, r) for e, r in zip(expected, recomputed))
    if isinstance(expected, (int, float)) and isinstance(recomputed, (int, float)) and not isinstance(expected, bool):
        if math.isinf(expected) or math.isinf(recomputed):
            return expected == recomputed
        return abs(expected - recomputed) <= 1e-9 * max(1.0, abs(expected))
    return expected == recomputed


def verify_report(report_path: str | Path) -> list[tuple[str, bool]]:
    """Recompute every traced report value from its CSV artifact; (name, matches) per entry."""
    report_path = Path(report_path)
    report = read_json(report_path)
    checks = []
    for item in report.get("traced", []):
        rows = read_csv(report_path.parent / item["artifact"])
        if "rows" in item:
            start, stop = item["rows"]
            rows = rows[start:stop]
        recomputed = REDUCERS[item["reduce"]](rows, item["column"])
        ok = _matches(item["value"], recomputed)
        if not ok:
            logger.warning("Report value %s=%r does not match %r recomputed from %s", item["name"], item["value"], recomputed, item["artifact"])
        checks.append((item["name"], ok))
    return checks


def recompute_rms(rows: list[dict[str, str]], controlled: Sequence[str]) -> list[float]:
    """RMS per control-log row from its stored normalized error columns."""
    out = []
    for r in rows:
        errs = np.array([float(r[f"error_{n}"]) for n in controlled])
        out.append(control.rms(errs))
    return out


# --- shared pipeline pieces ---


class Scenario:
    """One scenario run bound to its config, output directory and seed streams."""

    def __init__(self, config: ScenarioConfig, out_dir: Path):
        self.config = config
        self.out = out_dir
        self.streams = SeedStreams(config.seed)
        self.plant = Plant(config.plant, noise=config.noise)
        self.reference_plant = Plant(config.plant, noise=False)
        start, end = config.idle_window
        self.plan: ChronogramPlan = schedule(list(config.instruments.values()), cycle_time=end, ejection_offset=start)
        self.target = nominal_quality(self.reference_plant)
        self.report = RunReport(kind=config.kind, seed=config.seed, config=config.echo())

    def artifact(self, name: str) -> Path:
        path = self.out / name
        self.report.artifacts.append(name)
        return path

    def train_config(self, stream: str) -> nnet.TrainConfig:
        return self.config.network.train.model_copy(update={"seed": self.streams.seed(stream) % 2**32})

    def cycle(
        self, params: ProcessParams, index: int, stream: str = "plant", state: DisturbanceState | None = None
    ) -> CycleRecord:
        record = self.plant.run_cycle(params, state, rng_seed=self.streams.seed(stream, index), cycle_index=index)
        return measure_cycle(
            record,
            self.plan.anchored(record),
            self.streams.seed(f"metrology.{stream}", index),
            noise=self.config.measurement_noise,
        )

    def sample_params(
        self, factors: Sequence[str], ranges: dict[str, tuple[float, float]], n: int, levels: int, random: bool, stream: str
    ) -> list[ProcessParams]:
        if random:
            rng = np.random.default_rng(self.streams.seed(stream))
            return [
                ProcessParams().with_values(**{f: float(rng.uniform(*ranges[f])) for f in factors}) for _ in range(n)
            ]
        design = doe.factorial_design(len(factors), levels, factor_names=factors)
        grid = doe.decode(design, ranges)
        return [grid[i % len(grid)] for i in range(n)]

    def dataset(
        self, factors: Sequence[str], ranges: dict[str, tuple[float, float]], n: int, levels: int, random: bool, stream: str
    ) -> list[CycleRecord]:
        """Consecutive cycles under the scenario's disturbance profile (none by default)."""
        params = self.sample_params(factors, ranges, n, levels, random, f"{stream}.params")
        profile = self.config.disturbance.to_profile()
        return [self.cycle(p, i, stream, profile.resolve(i)) for i, p in enumerate(params)]

    def write_cycles(self, name: str, cycles: Sequence[CycleRecord]) -> Path:
        header = ["cycle_index", *PARAM_FIELDS, *(f"measured_{q}" for q in QUALITY_FIELDS), "peak_pressure"]
        rows = [
            [
                c.cycle_index,
                *(getattr(c.params, n) for n in PARAM_FIELDS),
                *(getattr(c.measured_quality or c.true_quality, q) for q in QUALITY_FIELDS),
                c.trace.peak_pressure,
            ]
            for c in cycles
        ]
        return write_csv(self.artifact(name), header, rows)

    def heldout_rows(self, model: control.ProcessModel, x: np.ndarray, y: np.ndarray, index: Sequence[int], config: nnet.TrainConfig) -> list[list[Any]]:
        """Rows of the validation split the model's held-out correlation was computed on."""
        _, val_idx = nnet.split_indices(len(x), config.validation_fraction, np.random.default_rng(config.seed))
        idx = val_idx if len(val_idx) >= 3 else np.arange(len(x))
        pred = model.predict_vector(x[idx])
        return [[int(index[i]), *y[i].tolist(), *p.tolist()] for i, p in zip(idx, pred)]

    def write_heldout(self, name: str, model: control.ProcessModel, x: np.ndarray, y: np.ndarray, index: Sequence[int], config: nnet.TrainConfig) -> Path:
        header = ["cycle_index", *(f"measured_{o}" for o in model.outputs), *(f"predicted_{o}" for o in model.outputs)]
        path = write_csv(self.artifact(name), header, self.heldout_rows(model, x, y, index, config))
        for o in model.outputs:
            self.report.trace(f"correlation_{o}", path, f"measured_{o}|predicted_{o}", "pearson", model.correlation[o])
        return path

    def save_network(self, name: str, net: nnet.Network) -> Path:
        return nnet.save_network(net, self.artifact(name))


def start_params(offsets: dict[str, float], base: ProcessParams | None = None) -> ProcessParams:
    """Nominal parameters moved by `offsets`, clamped to machine ranges."""
    base = base or ProcessParams()
    params, _ = clamp_to_ranges({n: getattr(base, n) + v for n, v in offsets.items()}, base)
    return params


def best_achievable_rms(
    plant: Plant,
    target: PartQuality,
    ranges: dict[str, tuple[float, float]],
    tolerances: control.Tolerances,
    *,
    steps: int = 41,
) -> tuple[float, ProcessParams]:
    """Grid search over noise-free plant quality: the lowest RMS any setting inside `ranges` reaches."""
    names = list(ranges)
    axes = [np.linspace(lo, hi, steps) for lo, hi in ranges.values()]
    best, best_params = math.inf, ProcessParams()
    for point in np.array(np.meshgrid(*axes, indexing="ij")).reshape(len(names), -1).T:
        params = ProcessParams().with_values(**dict(zip(names, point.tolist())))
        value = control.rms(control.normalized_errors(plant.quality(params), target, tolerances))
        if value < best:
            best, best_params = value, params
    return best, best_params


# --- pipelines, one per scenario kind ---


def _screen(s: Scenario) -> None:
    spec = s.config.design
    design = doe.pb_design(len(spec.factors), n_runs=spec.n_runs, factor_names=spec.factors).replicate(spec.replicates)
    params = doe.decode(design, spec.ranges)
    responses = []
    balance = next((i for i in s.config.instruments.values() if i.kind == "mass"), BALANCE)
    for i, p in enumerate(params):
        record = s.plant.run_cycle(p, rng_seed=s.streams.seed("plant.screen", i), cycle_index=i)
        if spec.response == "peak_pressure":
            responses.append(record.trace.peak_pressure)
        else:
            # cycle times differ across runs, so only the balance is scheduled
            seed = s.streams.seed("metrology.screen", i)
            responses.append(weigh(record.true_quality.mass, seed, instrument=balance, noise=s.config.measurement_noise))
    report = doe.fisher_screen(design, responses, spec.alpha)
    doe.write_design_csv(s.artifact("design.csv"), design, params, responses)
    screening = doe.write_report_csv(s.artifact("screening.csv"), report)
    s.report.results["screen"] = {
        "n_runs": design.n_runs,
        "replicates": design.replicates,
        "response": spec.response,
        "error_df": report.error_df,
        "error_mean_square": report.error_mean_square,
        "significant": s.report.trace(
            "significant", screening, "significant", "labels_true", report.significant_factors()
        ),
        "factors": {f.name: {"effect": f.effect, "F": f.f_statistic, "p": f.p_value} for f in report.factors},
    }


def _feed_forward(s: Scenario, cycles: list[CycleRecord]) -> None:
    spec = s.config.network
    cfg = s.train_config("nnet.forward")
    inputs = tuple(s.config.dataset.factors)
    model = control.fit_forward(cycles, inputs=inputs, hidden=spec.hidden, config=cfg)
    x = np.array([[getattr(c.params, n) for n in inputs] for c in cycles])
    y = np.array([[getattr(c.measured_quality, n) for n in model.outputs] for c in cycles])
    s.write_heldout("heldout.csv", model, x, y, [c.cycle_index for c in cycles], cfg)
    s.save_network("network.json", model.net)
    s.report.results["forward"] = {
        "topology": model.net.topology.label(),
        "correlation": model.correlation,
        "best_epoch": model.history.best_epoch if model.history else 0,
    }


NARX_INPUTS = ("hold_pressure", "melt_temp")


def _narx(s: Scenario, cycles: list[CycleRecord]) -> None:
    spec = s.config.network
    cfg = s.train_config("nnet.narx")
    outputs = control.FORWARD_OUTPUTS
    u = np.array([[getattr(c.params, n) for n in NARX_INPUTS] for c in cycles])
    y = np.array([[getattr(c.measured_quality, n) for n in outputs] for c in cycles])
    n_in = len(NARX_INPUTS) * spec.input_lags + len(outputs) * spec.output_lags
    topology = nnet.Topology(
        (n_in, *spec.hidden, len(outputs)),
        spec.activation,
        recurrence="narx",
        input_lags=spec.input_lags,
        output_lags=spec.output_lags,
    )
    x_rows, y_rows = nnet.narx_dataset(topology, u, y)
    net, history = nnet.train(nnet.init(topology, cfg.seed), x_rows, y_rows, cfg)
    start = len(u) - len(y_rows)
    one_step = nnet.forward(net, x_rows)
    free = nnet.narx_free_run(net, u, y[:start])
    header = ["cycle_index", *(f"measured_{o}" for o in outputs), *(f"one_step_{o}" for o in outputs), *(f"free_run_{o}" for o in outputs)]
    rows = [
        [cycles[start + t].cycle_index, *y_rows[t].tolist(), *one_step[t].tolist(), *free[t].tolist()]
        for t in range(len(y_rows))
    ]
    path = write_csv(s.artifact("narx.csv"), header, rows)
    s.save_network("network.json", net)
    results: dict[str, Any] = {"topology": topology.label(), "best_epoch": history.best_epoch}
    for j, o in enumerate(outputs):
        results[f"one_step_nrmse_{o}"] = s.report.trace(
            f"one_step_nrmse_{o}", path, f"measured_{o}|one_step_{o}", "nrmse", nrmse(y_rows[:, j], one_step[:, j])
        )
        results[f"free_run_nrmse_{o}"] = s.report.trace(
            f"free_run_nrmse_{o}", path, f"measured_{o}|free_run_{o}", "nrmse", nrmse(y_rows[:, j], free[:, j])
        )
    s.report.results["narx"] = results


PROFILE_WINDOW = 20


def profile_sequences(profiles: Sequence[np.ndarray], length: int) -> tuple[np.ndarray, np.ndarray, list[tuple[int, int]]]:
    """Non-overlapping windows of `length` points, each followed by the point to predict."""
    seqs, targets, where = [], [], []
    for k, profile in enumerate(profiles):
        for t in range(length, len(profile), length):
            seqs.append(profile[t - length : t, None])
            targets.append([profile[t]])
            where.append((k, t))
    return np.array(seqs), np.array(targets), where


def _jordan_elman(s: Scenario, cycles: list[CycleRecord]) -> None:
    spec = s.config.network
    cfg = s.train_config("nnet.je")
    profiles = [average_trace(c.trace, PROFILE_WINDOW) for c in cycles]
    n_test = max(1, round(len(cycles) * cfg.validation_fraction))
    train_profiles, test_profiles = profiles[:-n_test], profiles[-n_test:]
    seqs, targets, _ = profile_sequences(train_profiles, spec.sequence_length)
    topology = nnet.Topology(
        (1, *spec.hidden, 1),
        spec.activation,
        recurrence="jordan_elman",
        context_decay=spec.context_decay,
        context_mix=spec.context_mix,
    )
    net, history = nnet.je_train(nnet.init(topology, cfg.seed), seqs, targets, cfg)
    test_seqs, test_targets, where = profile_sequences(test_profiles, spec.sequence_length)
    predicted = np.array([nnet.je_predict(net, q)[0] for q in test_seqs])
    offset = len(cycles) - n_test
    rows = [
        [cycles[offset + k].cycle_index, t, float(test_targets[i, 0]), float(predicted[i])]
        for i, (k, t) in enumerate(where)
    ]
    path = write_csv(s.artifact("je_predictions.csv"), ["cycle_index", "point", "target", "predicted"], rows)
    s.save_network("network.json", net)
    s.report.results["jordan_elman"] = {
        "topology": topology.label(),
        "profile_points": len(profiles[0]),
        "training_sequences": len(seqs),
        "best_epoch": history.best_epoch,
        "one_step_nrmse": s.report.trace(
            "one_step_nrmse", path, "target|predicted", "nrmse", nrmse(test_targets[:, 0], predicted)
        ),
    }


def _train_forward(s: Scenario) -> None:
    spec = s.config.dataset
    cycles = s.dataset(spec.factors, spec.ranges, spec.n_cycles, spec.levels, spec.random, "dataset")
    s.write_cycles("cycles.csv", cycles)
    recurrence = s.config.network.recurrence
    if recurrence == "narx":
        _narx(s, cycles)
    elif recurrence == "jordan_elman":
        _jordan_elman(s, cycles)
    else:
        _feed_forward(s, cycles)


def _train_inverse(s: Scenario) -> None:
    spec = s.config.dataset
    cfg = s.train_config("nnet.inverse")
    cycles = s.dataset(spec.factors, spec.ranges, spec.n_cycles, spec.levels, spec.random, "dataset")
    s.write_cycles("cycles.csv", cycles)
    fields = s.config.tolerances.controlled
    model = control.fit_inverse(
        cycles, quality_fields=fields, params=s.config.loop.controlled_params, hidden=s.config.network.hidden, config=cfg
    )
    x = np.array([[getattr(c.measured_quality, n) for n in fields] for c in cycles])
    y = np.array([[getattr(c.params, n) for n in model.outputs] for c in cycles])
    s.write_heldout("heldout.csv", model, x, y, [c.cycle_index for c in cycles], cfg)
    s.save_network("inverse.json", model.net)
    inferred, clamped = control.infer_params(model, s.target, ProcessParams())
    s.report.results["inverse"] = {
        "topology": model.net.topology.label(),
        "correlation": model.correlation,
        "params_for_target": {n: getattr(inferred, n) for n in model.outputs},
        "clamped": clamped,
    }


def _tune_topology(s: Scenario) -> None:
    spec = s.config.network
    data = s.config.dataset
    cycles = s.dataset(data.factors, data.ranges, data.n_cycles, data.levels, data.random, "dataset")
    s.write_cycles("cycles.csv", cycles)
    x = np.array([[getattr(c.params, n) for n in data.factors] for c in cycles])
    y = np.array([[getattr(c.measured_quality, n) for n in control.FORWARD_OUTPUTS] for c in cycles])
    selected, search = nnet.topology_search(
        x,
        y,
        spec.max_hidden,
        s.train_config("nnet.search"),
        patience=spec.search_patience,
        alpha=spec.prune_alpha,
        activation=spec.activation,
        compare_depth=spec.compare_depth,
    )
    growth = write_csv(
        s.artifact("search.csv"),
        ["hidden", "train_mse", "validation_mse"],
        zip(search.hidden_sizes, search.train_mse, search.validation_mse),
    )
    write_csv(
        s.artifact("pruning.csv"),
        ["unit", "f", "p", "remaining"],
        [[int(step["unit"]), step["f"], step["p"], int(step["remaining"])] for step in search.pruning_steps],
    )
    s.report.results["topology"] = {
        "selected": selected.label(),
        "grown_hidden": search.grown_hidden,
        "pruned_hidden": search.pruned_hidden,
        "selected_validation_mse": s.report.trace(
            "selected_validation_mse", growth, "validation_mse", "min", search.selected_validation_mse
        ),
        "pruned_validation_mse": search.pruned_validation_mse,
        "depth_comparison": search.depth_comparison,
    }


def _closed_loop(s: Scenario) -> None:
    spec = s.config.loop
    cfg = s.train_config("nnet.inverse")
    tolerances = s.config.tolerances
    params = s.sample_params(
        spec.controlled_params, spec.training_ranges, spec.training_cycles, 3, True, "loop.training.params"
    )
    cycles = [s.cycle(p, i, "loop.training") for i, p in enumerate(params)]
    s.write_cycles("training_cycles.csv", cycles)
    inverse = control.fit_inverse(
        cycles, quality_fields=tolerances.controlled, params=spec.controlled_params, hidden=s.config.network.hidden, config=cfg
    )
    s.save_network("inverse.json", inverse.net)
    oracle, oracle_params = best_achievable_rms(s.reference_plant, s.target, spec.training_ranges, tolerances)
    start = start_params(spec.start_offsets)
    log = control.run_inverse_loop(
        s.plant,
        inverse,
        s.target,
        start,
        spec.max_iters,
        spec.gain,
        threshold=spec.threshold,
        tolerances=tolerances,
        plan=s.plan,
        disturbance=s.config.disturbance.to_profile(),
        plant_seed=s.streams.seed("plant.loop"),
        measure_seed=s.streams.seed("metrology.loop"),
        measurement_noise=s.config.measurement_noise,
    )
    path = log.write_csv(s.artifact("control_log.csv"))
    timings = [
        CycleTiming(e.cycle_index, s.plan.total_duration, e.timings.get("inference", 0.0), e.timings.get("adjust", 0.0))
        for e in log.entries
    ]
    record_timing(s, timings)
    s.report.results["closed_loop"] = {
        "start_params": {n: getattr(start, n) for n in spec.controlled_params},
        "rms_trajectory": s.report.trace("rms_trajectory", path, "rms", "list", log.rms_trajectory()),
        "final_rms": s.report.trace("final_rms", path, "rms", "last", log.final.rms),
        "iterations": log.final.iteration,
        "converged": log.final.rms <= spec.threshold,
        "oracle_best_rms": oracle,
        "oracle_params": {n: getattr(oracle_params, n) for n in spec.training_ranges},
        "inverse_correlation": inverse.correlation,
        "warnings": log.warnings,
    }


def record_timing(s: Scenario, timings: Sequence[CycleTiming]) -> list[BudgetResult]:
    """Timings are wall-clock, so they go to the JSON report only, never to CSV artifacts."""
    start, end = s.config.idle_window
    budget = check_budget(timings, end - start)
    s.report.timing = [
        {"cycle_index": t.cycle_index, "measure": t.measure, "inference": t.inference, "adjust": t.adjust} for t in timings
    ]
    s.report.budget = [{"cycle_index": b.cycle_index, "total": b.total, "window": b.window, "passed": b.passed} for b in budget]
    return budget


def _mass_deviation(mass: float, target: float) -> float:
    return (mass - target) / target * 100.0


def _regulate(s: Scenario) -> None:
    spec = s.config.regulation
    n = s.config.n_cycles
    if n <= spec.steady_state_cycles:
        raise RangeError(f"n_cycles ({n}) must exceed steady_state_cycles ({spec.steady_state_cycles})")
    disturbance = s.config.disturbance.to_profile()
    nominal = ProcessParams()
    reference = s.reference_plant.run_cycle(nominal).trace
    open_loop = s.plant.run_sequence(nominal, n, disturbance, rng_seed=s.streams.seed("plant.open"))
    regulator = None
    if spec.use_network:
        regulator = control.fit_regulator(
            s.plant,
            nominal,
            n_cycles=spec.training_cycles,
            window=spec.gains.window,
            seed=s.streams.seed("plant.regulator"),
            config=s.train_config("nnet.regulator"),
        )
        s.save_network("regulator.json", regulator.net)
    log = control.regulate_profile(
        reference,
        s.plant,
        n,
        disturbance,
        start_params=nominal,
        gains=spec.gains,
        regulator=regulator,
        target=s.target,
        tolerances=s.config.tolerances,
        seed=s.streams.seed("plant.regulated"),
    )
    log.write_csv(s.artifact("control_log.csv"))
    target_mass = s.target.mass
    rows = [
        [
            i,
            disturbance.value_at(i),
            record.true_quality.mass,
            entry.measured.mass,
            _mass_deviation(record.true_quality.mass, target_mass),
            _mass_deviation(entry.measured.mass, target_mass),
            entry.params.hold_pressure,
            entry.params.melt_temp,
        ]
        for i, (record, entry) in enumerate(zip(open_loop, log.entries))
    ]
    header = [
        "cycle_index", "disturbance", "open_mass", "regulated_mass",
        "open_deviation_pct", "regulated_deviation_pct", "hold_pressure", "melt_temp",
    ]
    path = write_csv(s.artifact("regulation.csv"), header, rows)
    tail = (n - spec.steady_state_cycles, n)
    open_dev = float(np.mean([r[4] for r in rows[tail[0] :]]))
    reg_dev = float(np.mean([r[5] for r in rows[tail[0] :]]))
    s.report.results["regulation"] = {
        "law": "network" if regulator is not None else "proportional",
        "open_deviation_pct": s.report.trace("open_deviation_pct", path, "open_deviation_pct", "mean", open_dev, rows=tail),
        "regulated_deviation_pct": s.report.trace(
            "regulated_deviation_pct", path, "regulated_deviation_pct", "mean", reg_dev, rows=tail
        ),
        "rejection_ratio": abs(open_dev) / max(abs(reg_dev), 1e-12),
    }


def _spc_compare(s: Scenario) -> None:
    spec = s.config.spc
    disturbance = s.config.disturbance.to_profile()
    tolerances = s.config.tolerances

    def stream(name: str, n: int) -> list[CycleRecord]:
        def measure(record: CycleRecord) -> CycleRecord:
            seed = s.streams.seed(f"metrology.{name}", record.cycle_index)
            return measure_cycle(record, s.plan, seed, noise=s.config.measurement_noise)

        return s.plant.run_sequence(
            ProcessParams(), n, disturbance, rng_seed=s.streams.seed(f"plant.{name}"), measure=measure
        )

    train_cycles = stream("spc.train", spec.training_cycles)
    train_labels = control.conformity_labels(train_cycles, s.target, tolerances)
    classifier = control.fit_classifier(
        train_cycles,
        train_labels,
        window=PROFILE_WINDOW,
        hidden=spec.hidden,
        config=s.train_config("nnet.classifier"),
    )
    s.save_network("classifier.json", classifier.model.net)
    test_cycles = stream("spc.test", s.config.n_cycles)
    labels = control.conformity_labels(test_cycles, s.target, tolerances)
    comparison = control.classify_parts(
        classifier,
        test_cycles,
        labels,
        spc_baseline_n=spec.baseline_n,
        spc_k=spec.k,
        detection_target=spec.detection_target,
    )
    chart = control.spc_chart([c.trace.peak_pressure for c in test_cycles], spec.baseline_n, k=spec.k)
    nn_scores = classifier.scores(test_cycles)
    spc_scores = chart.scores()
    rows = [
        [
            c.cycle_index,
            c.trace.peak_pressure,
            c.true_quality.mass,
            float(spc_scores[i]),
            bool(chart.out_of_control[i]),
            float(nn_scores[i]),
            bool(nn_scores[i] >= classifier.threshold),
            labels[i],
        ]
        for i, c in enumerate(test_cycles)
    ]
    header = ["cycle_index", "peak_pressure", "true_mass", "spc_score", "spc_flag", "nn_score", "nn_flag", "nonconforming"]
    path = write_csv(s.artifact("spc_compare.csv"), header, rows)
    summary = comparison.as_dict()
    s.report.trace("n_nonconforming", path, "nonconforming", "count_true", comparison.n_nonconforming)
    s.report.trace("spc_flags", path, "spc_flag", "count_true", comparison.spc.tp + comparison.spc.fp)
    s.report.trace("nn_flags", path, "nn_flag", "count_true", comparison.network.tp + comparison.network.fp)
    summary["spc_limits"] = {"center": chart.center, "sigma": chart.sigma, "ucl": chart.ucl, "lcl": chart.lcl}
    summary["training_nonconforming"] = int(sum(train_labels))
    s.report.results["spc_compare"] = summary


PIPELINES: dict[str, Callable[[Scenario], None]] = {
    "screen": _screen,
    "train-forward": _train_forward,
    "train-inverse": _train_inverse,
    "tune-topology": _tune_topology,
    "closed-loop": _closed_loop,
    "regulate": _regulate,
    "spc-compare": _spc_compare,
}


def config_digest(config: ScenarioConfig) -> str:
    return hashlib.sha256(json.dumps(config.echo(), sort_keys=True).encode("utf-8")).hexdigest()


def run_scenario(config: ScenarioConfig, out_dir: str | Path | None = None) -> RunReport:
    """
    Run the pipeline for config.kind, write report.json next to the artifacts and
    record the run in the output directory's ledger. Module errors are re-raised
    as ScenarioError after a failed run is recorded.
    """
    out = Path(out_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ledger = ledger_path(out)
    logger.info("Running %s scenario (seed %d) into %s", config.kind, config.seed, out)
    try:
        scenario = Scenario(config, out)
        PIPELINES[config.kind](scenario)
    except MoldpilotError as e:
        record_run(
            ledger,
            kind=config.kind,
            seed=config.seed,
            config_sha256=config_digest(config),
            toolkit_version=TOOLKIT_VERSION,
            plant_model_version=PLANT_MODEL_VERSION,
            status="failed",
            message=str(e),
        )
        logger.error("Scenario %s failed: %s", config.kind, e)
        raise ScenarioError(config.kind, e) from e
    report = scenario.report
    report_path = write_json(out / "report.json", report.as_dict())
    record_run(
        ledger,
        kind=config.kind,
        seed=config.seed,
        config_sha256=config_digest(config),
        toolkit_version=TOOLKIT_VERSION,
        plant_model_version=PLANT_MODEL_VERSION,
        status="ok",
        report_path=report_path.name,
        artifact_paths=[out / name for name in report.artifacts] + [report_path],
    )
    logger.info("Wrote %d artifacts and %s", len(report.artifacts), report_path)
    return report


# --- self-test thresholds ---

PEAK_PRESSURE_FACTORS = {"hold_pressure", "melt_temp", "inject_speed"}
MIN_CORRELATION = 0.90
MAX_NRMSE = 0.1
ORACLE_RMS = 0.05
COMPUTE_LIMIT = 1.0  # s per cycle, inference + adjust
REJECTION_RATIO = 10.0
FP_RATIO = 0.5


def self_test(report: RunReport) -> list[tuple[str, bool]]:
    """Acceptance thresholds for the report's scenario kind, as (check, passed)."""
    r = report.results
    checks: list[tuple[str, bool]] = []
    if "screen" in r:
        flagged = set(r["screen"]["significant"])
        if r["screen"]["response"] == "peak_pressure":
            checks.append(("screen flags exactly the active factors", flagged == PEAK_PRESSURE_FACTORS))
        else:
            checks.append(("screen flags only process parameters", flagged <= set(PARAM_FIELDS)))
    for key in ("forward", "inverse"):
        if key in r:
            for name, value in r[key]["correlation"].items():
                checks.append((f"{key} correlation {name} >= {MIN_CORRELATION}", value >= MIN_CORRELATION))
    if "narx" in r:
        for name in control.FORWARD_OUTPUTS:
            checks.append((f"NARX one-step NRMSE {name} < {MAX_NRMSE}", r["narx"][f"one_step_nrmse_{name}"] < MAX_NRMSE))
    if "jordan_elman" in r:
        checks.append((f"JE one-step NRMSE < {MAX_NRMSE}", r["jordan_elman"]["one_step_nrmse"] < MAX_NRMSE))
    if "topology" in r:
        checks.append(("topology search selected a finite model", math.isfinite(r["topology"]["selected_validation_mse"])))
    if "closed_loop" in r:
        loop = r["closed_loop"]
        threshold = report.config["loop"]["threshold"]
        checks.append((f"oracle reaches RMS <= {ORACLE_RMS}", loop["oracle_best_rms"] <= ORACLE_RMS))
        checks.append((f"loop reaches RMS <= {threshold}", loop["final_rms"] <= threshold))
        checks.append(("every cycle within the idle window", all(b["passed"] for b in report.budget)))
        compute = max((t["inference"] + t["adjust"] for t in report.timing), default=0.0)
        checks.append((f"compute per cycle < {COMPUTE_LIMIT} s", compute < COMPUTE_LIMIT))
    if "regulation" in r:
        checks.append((f"rejection ratio >= {REJECTION_RATIO}", r["regulation"]["rejection_ratio"] >= REJECTION_RATIO))
    if "spc_compare" in r:
        nn, spc = r["spc_compare"]["network"], r["spc_compare"]["spc"]
        checks.append(
            (
                f"network FP rate <= {FP_RATIO} x SPC at matched detection",
                nn["matched_fp_rate"] <= FP_RATIO * spc["matched_fp_rate"],
            )
        )
    for name, passed in checks:
        (logger.info if passed else logger.warning)("Self-test %s: %s", "pass" if passed else "FAIL", name)
    return checks
