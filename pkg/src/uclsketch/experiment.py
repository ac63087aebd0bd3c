"""Experiment plans: ingest a stream, decode with each algorithm, score, and export."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .controlplane import ControlPlane, FrozenRegistry
from .core import Config, ConfigError, ModelConfig, SketchConfig, TrainConfig, preset
from .dataplane import DataPlane, Snapshot
from .recovery import cm_query_many, cs_query_many, lsqr, omp
from .sensing import SketchOperator
from .solver import SolverModel, SlidingWindow, TrainReport, train
from .streamgen import TraceFormat, ZipfSpec, exact_counts, generate_arrays, read_trace_arrays

ALGORITHMS = ("ucl", "cm", "cs", "omp", "lsqr")
VARIANTS = ("full", "no-eq", "no-sr", "unshared")
CSV_HEADER = ("algorithm", "memory", "metric", "value", "seed")


@dataclass(frozen=True)
class TraceSpec:
    path: str
    fmt: TraceFormat = TraceFormat()


@dataclass(frozen=True)
class ExperimentPlan:
    dataset: ZipfSpec | TraceSpec
    presets: tuple[str, ...] = ("16KB",)
    algorithms: tuple[str, ...] = ("ucl", "cm")
    seeds: tuple[int, ...] = (7,)
    out: str | None = None
    train: TrainConfig = TrainConfig()
    model: ModelConfig = ModelConfig()
    sketch_overrides: dict = field(default_factory=dict)
    variants: tuple[str, ...] = ("full",)
    two_phase: bool = True
    key_len: int = 4

    def __post_init__(self):
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad or not self.algorithms:
            raise ConfigError(f"algorithms: unknown {bad}; choose from {list(ALGORITHMS)}")
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad or not self.variants:
            raise ConfigError(f"variants: unknown {bad}; choose from {list(VARIANTS)}")
        if not self.seeds:
            raise ConfigError("seeds: need at least one seed")
        for p in self.presets:
            self.sketch_config(p)
        self.check_memory_parity()

    def sketch_config(self, name: str, signed: bool = False) -> SketchConfig:
        return preset(name, key_len=self.key_len, signed=signed, **self.sketch_overrides)

    def check_memory_parity(self) -> None:
        for p in self.presets:
            sizes = {a: self.sketch_config(p, signed=(a == "cs")).memory_bytes for a in self.algorithms}
            if len(set(sizes.values())) > 1:
                raise ConfigError(f"memory parity violated for preset {p}: {sizes}")

    def manifest(self) -> dict:
        def enc(o):
            if dataclasses.is_dataclass(o):
                return {f.name: enc(getattr(o, f.name)) for f in dataclasses.fields(o)}
            if isinstance(o, (list, tuple)):
                return [enc(v) for v in o]
            if isinstance(o, dict):
                return {k: enc(v) for k, v in o.items()}
            return o

        doc = enc(self)
        doc["dataset_kind"] = "zipf" if isinstance(self.dataset, ZipfSpec) else "trace"
        doc["sketch"] = {p: enc(self.sketch_config(p)) for p in self.presets}
        return doc


def load_stream(dataset, key_len: int = 4) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(dataset, ZipfSpec):
        return generate_arrays(dataset, key_len)
    return read_trace_arrays(dataset.path, dataset.fmt)


@dataclass
class Ingested:
    """State left after streaming a dataset through one data plane."""

    dataplane: DataPlane
    control: ControlPlane
    registry: FrozenRegistry
    operator: SketchOperator
    final: Snapshot
    hf: dict[bytes, int]

    @property
    def window(self) -> list[Snapshot]:
        return self.dataplane.snapshots


def _finish(dp: DataPlane, cp: ControlPlane) -> Ingested:
    snaps = dp.snapshots
    final = snaps[-1] if snaps and snaps[-1].insert_count == dp.insert_count else dp.snapshot()
    cp.on_snapshot(final)
    reg = cp.registry.frozen()
    return Ingested(dp, cp, reg, cp.operator(reg), final, dp.hf_residents())


def ingest(cfg: SketchConfig, seed: int, keys, values, bucket_len: int = 512) -> Ingested:
    dp = DataPlane(cfg, seed)
    cp = ControlPlane(dp, bucket_len)
    cp.registry.handle_reports(dp.ingest(keys, values))
    return _finish(dp, cp)


def variant_configs(variant: str, tc: TrainConfig, mc: ModelConfig) -> tuple[TrainConfig, ModelConfig]:
    if variant == "no-eq":
        return dataclasses.replace(tc, equivariance=False), mc
    if variant == "no-sr":
        return dataclasses.replace(tc, lam=0.0), mc
    if variant == "unshared":
        return tc, dataclasses.replace(mc, shared=False)
    return tc, mc


def build_model(cfg: SketchConfig, mc: ModelConfig, n: int, seed: int) -> SolverModel:
    n_buckets = max(1, -(-n // mc.bucket_len))
    return SolverModel(cfg.depth, cfg.width, mc.hidden, mc.bucket_len, seed=seed, shared=mc.shared,
                       n_buckets=None if mc.shared else n_buckets)


def train_ucl(state: Ingested, tc: TrainConfig, mc: ModelConfig, seed: int, log=None):
    model = build_model(state.dataplane.cfg, mc, state.operator.n, seed)
    window = state.window[-tc.window_len:] or [state.final]
    report = train(model, window, state.operator, state.registry.hot_indices(), tc, seed=seed,
                   c=tc.transform_c or state.dataplane.cfg.sampling_interval, log=log)
    return model, report


def run_concurrent(cfg: SketchConfig, seed: int, keys, values, tc: TrainConfig, mc: ModelConfig,
                   chunk: int = 50_000, epochs_per_round: int = 5, log=None):
    """Ingestion on a writer thread while a trainer thread refits on the latest window.

    Only the writer touches the data plane; the trainer reads immutable
    snapshots and frozen registries. Once the stream ends the trainer spends
    whatever epoch budget is left on the final window.
    """
    if not mc.shared:
        raise ConfigError("concurrent mode needs shared buckets; use --two-phase for the unshared variant")
    window = SlidingWindow(tc.window_len)
    lock = threading.Lock()
    dp = DataPlane(cfg, seed, keep_snapshots=False)
    cp = ControlPlane(dp, mc.bucket_len)

    def on_snap(s):
        with lock:
            window.push(s)
        cp.on_snapshot(s)

    dp.on_snapshot = on_snap
    done = threading.Event()
    errors: list[BaseException] = []

    def writer():
        try:
            for lo in range(0, len(keys), chunk):
                cp.registry.handle_reports(dp.ingest(keys[lo:lo + chunk], values[lo:lo + chunk]))
        except BaseException as exc:  # surfaced on the caller's thread
            errors.append(exc)
        finally:
            done.set()

    model = SolverModel(cfg.depth, cfg.width, mc.hidden, mc.bucket_len, seed=seed)
    spent = 0
    reports: list[TrainReport] = []
    th = threading.Thread(target=writer, name="dataplane-writer")
    th.start()
    while not done.is_set() and spent < tc.epochs:
        with lock:
            snaps = window.items()
        if len(snaps) < 2:
            done.wait(0.01)
            continue
        reg = cp.registry.frozen()
        if len(reg) == 0:
            done.wait(0.01)
            continue
        op = cp.operator(reg)
        k = min(epochs_per_round, tc.epochs - spent)
        reports.append(train(model, snaps, op, reg.hot_indices(), dataclasses.replace(tc, epochs=k),
                             seed=seed + spent, c=tc.transform_c or cfg.sampling_interval, log=log))
        cp.publish(model)
        spent += k
    th.join()
    if errors:
        raise errors[0]
    dp.snapshots = window.items()
    state = _finish(dp, cp)
    if spent < tc.epochs:
        reports.append(train(model, state.window, state.operator, state.registry.hot_indices(),
                             dataclasses.replace(tc, epochs=tc.epochs - spent), seed=seed + spent,
                             c=tc.transform_c or cfg.sampling_interval, log=log))
    cp.publish(model)
    merged = TrainReport(equivariance=tc.equivariance)
    for r in reports:
        merged.epochs.extend(r.epochs)
    return state, model, merged


def solver_estimates(state: Ingested, algo: str, model: SolverModel | None = None) -> np.ndarray:
    """Per-registry-key sketch-resident estimate (counts, rounded, >= 0)."""
    snap = state.final
    A = state.operator
    if algo == "ucl":
        state.control.publish(model)
        return state.control.freeze_epoch().query_all()
    if algo == "cm":
        x = cm_query_many(snap.y_raw, A.positions)
    elif algo == "cs":
        x = cs_query_many(snap.y_raw, A.positions, A.signs)
    elif algo == "lsqr":
        x = lsqr(A, snap.y_raw.astype(np.float64)).x_hat
    elif algo == "omp":
        x = omp(A, snap.y_raw.astype(np.float64)).x_hat
    else:
        raise ConfigError(f"unknown algorithm {algo!r}")
    return metrics.round_half_up(x)


def combine(state: Ingested, truth_keys, solver_part: np.ndarray) -> dict[bytes, int]:
    """Heavy-filter count plus the decoded sketch part for registered keys."""
    idx, hf = state.registry.index, state.hf
    return {k: hf.get(k, 0) + (int(solver_part[idx[k]]) if k in idx else 0) for k in truth_keys}


@dataclass
class ExperimentResult:
    rows: list[tuple] = field(default_factory=list)
    reports: dict[str, TrainReport] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for algo, mem, metric, value, seed in self.rows:
            w.writerow([algo, mem, metric, repr(float(value)), seed])
        return buf.getvalue()

    def value(self, algo: str, metric: str, memory: str | None = None, seed: int | None = None) -> float:
        for a, m, k, v, s in self.rows:
            if a == algo and k == metric and memory in (None, m) and seed in (None, s):
                return v
        raise KeyError((algo, metric, memory, seed))


def run_plan(plan: ExperimentPlan, log=None) -> ExperimentResult:
    keys, values = load_stream(plan.dataset, plan.key_len)
    truth = exact_counts(keys, values)
    res = ExperimentResult()
    for mem in plan.presets:
        for seed in plan.seeds:
            states: dict[bool, Ingested] = {}

            def state_for(signed: bool):
                if signed not in states:
                    t0 = time.perf_counter()
                    states[signed] = ingest(plan.sketch_config(mem, signed), seed, keys, values,
                                            plan.model.bucket_len)
                    res.timings[f"ingest/{mem}/{seed}/{int(signed)}"] = time.perf_counter() - t0
                return states[signed]

            for algo in plan.algorithms:
                variants = plan.variants if algo == "ucl" else ("full",)
                for variant in variants:
                    name = algo if variant == "full" else f"{algo}-{variant}"
                    t0 = time.perf_counter()
                    model = None
                    if algo == "ucl":
                        tc, mc = variant_configs(variant, plan.train, plan.model)
                        if plan.two_phase or not mc.shared:
                            st = state_for(False)
                            model, report = train_ucl(st, tc, mc, seed, log=log)
                        else:
                            st, model, report = run_concurrent(plan.sketch_config(mem), seed, keys, values,
                                                               tc, mc, log=log)
                        res.reports[f"{name}/{mem}/{seed}"] = report
                    else:
                        st = state_for(algo == "cs")
                    part = solver_estimates(st, algo, model)
                    scores = metrics.evaluate(truth, combine(st, truth.keys(), part))
                    res.timings[f"{name}/{mem}/{seed}"] = time.perf_counter() - t0
                    for metric, v in scores.items():
                        res.rows.append((name, mem, metric, v, seed))
    if plan.out:
        write_outputs(plan, res)
    return res


def write_outputs(plan: ExperimentPlan, res: ExperimentResult) -> None:
    out = Path(plan.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(res.csv_text())
    for tag, report in res.reports.items():
        report.write_csv(out / ("train_" + tag.replace("/", "_") + ".csv"))
    (out / "manifest.json").write_text(json.dumps(plan.manifest(), indent=2, sort_keys=True) + "\n")


def plan_from_config(cfg: Config, dataset, algorithms, presets=None, seeds=None, out=None,
                     variants=("full",), two_phase=True) -> ExperimentPlan:
    """Plan whose sketch fields follow ``cfg.sketch`` except for the preset-driven (s, d, w)."""
    base = SketchConfig()
    over = {f.name: getattr(cfg.sketch, f.name) for f in dataclasses.fields(SketchConfig)
            if f.name not in ("hf_slots", "depth", "width", "signed", "key_len")
            and getattr(cfg.sketch, f.name) != getattr(base, f.name)}
    return ExperimentPlan(dataset=dataset, presets=tuple(presets or ("16KB",)), algorithms=tuple(algorithms),
                          seeds=tuple(seeds or (cfg.seed,)), out=out, train=cfg.train, model=cfg.model,
                          sketch_overrides=over, variants=tuple(variants), two_phase=two_phase,
                          key_len=cfg.sketch.key_len)
