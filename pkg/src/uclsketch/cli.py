"""Command-line entry point: ``uclsketch {generate,run,query,bench,ablate,inspect}``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure (I/O,
malformed trace, diverged training).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

from . import metrics
from .controlplane import KeyRegistry, QueryContext
from .core import DEFAULT_SEED, PRESETS, Config, ConfigError, env_seed, load_config
from .dataplane import Snapshot
from .experiment import (ALGORITHMS, VARIANTS, ExperimentPlan, TraceSpec, combine, ingest, load_stream,
                         plan_from_config, run_concurrent, run_plan, solver_estimates, train_ucl)
from .solver import DivergenceError, SolverModel
from .streamgen import TraceError, TraceFormat, ZipfSpec, exact_counts, generate, write_trace

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def parse_zipf(text: str, seed: int = 1) -> ZipfSpec:
    """``SKEW:LENGTH[:UNIVERSE]``; the universe defaults to 10**6."""
    parts = text.split(":")
    if len(parts) not in (2, 3):
        raise ConfigError(f"--zipf expects SKEW:LENGTH[:UNIVERSE], got {text!r}")
    try:
        skew, length = float(parts[0]), int(float(parts[1]))
        universe = int(float(parts[2])) if len(parts) == 3 else 10**6
        return ZipfSpec(skew, universe, length, seed=seed)
    except ValueError as e:
        raise ConfigError(f"--zipf: {e}") from None


def resolve_config(args) -> Config:
    cfg = load_config(args.config) if getattr(args, "config", None) else Config()
    seed = cfg.seed
    if os.environ.get("UCL_SEED"):
        seed = env_seed()
    if getattr(args, "seed", None) is not None:
        seed = args.seed
    train = cfg.train
    if getattr(args, "epochs", None) is not None:
        train = dataclasses.replace(train, epochs=args.epochs)
    return dataclasses.replace(cfg, seed=seed, train=train)


def _dataset(args, cfg: Config):
    if getattr(args, "trace", None):
        return TraceSpec(args.trace, TraceFormat(args.format, cfg.sketch.key_len, not args.no_values))
    return parse_zipf(args.zipf or "1.3:1000000", args.zipf_seed)


def _seeds(text: str | None, base: int) -> tuple[int, ...]:
    if text is None:
        return (base,)
    if "," in text:
        return tuple(int(s) for s in _csv_list(text))
    return tuple(base + i for i in range(int(text)))


def _print_rows(rows) -> None:
    for algo, mem, metric, value, seed in rows:
        print(f"{algo:16s} {mem:6s} seed={seed:<10d} {metric:8s} {value:.6g}")


# -- subcommands -------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    spec = parse_zipf(args.zipf, args.zipf_seed)
    fmt = TraceFormat(args.format, cfg.sketch.key_len, not args.no_values)
    write_trace(args.out, fmt, generate(spec, fmt.key_len))
    print(f"wrote {spec.length} items to {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    dataset = _dataset(args, cfg)
    plan = plan_from_config(cfg, dataset, ["ucl"], presets=[args.preset] if args.preset else None,
                            two_phase=args.two_phase)
    sketch = plan.sketch_config(plan.presets[0])
    keys, values = load_stream(dataset, sketch.key_len)
    if args.two_phase:
        state = ingest(sketch, cfg.seed, keys, values, cfg.model.bucket_len)
        model, report = train_ucl(state, cfg.train, cfg.model, cfg.seed)
    else:
        state, model, report = run_concurrent(sketch, cfg.seed, keys, values, cfg.train, cfg.model)
    truth = exact_counts(keys, values)
    scores = metrics.evaluate(truth, combine(state, truth.keys(), solver_estimates(state, "ucl", model)))
    rows = [("ucl", plan.presets[0], k, v, cfg.seed) for k, v in scores.items()]
    _print_rows(rows)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["algorithm", "memory", "metric", "value", "seed"])
            w.writerows([r[:3] + (repr(float(r[3])), r[4]) for r in rows])
        report.write_csv(out / "train.csv")
        (out / "manifest.json").write_text(json.dumps(plan.manifest(), indent=2, sort_keys=True) + "\n")
    if args.state:
        save_state(args.state, state, model)
    return EXIT_OK


def save_state(path, state, model: SolverModel) -> None:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    state.final.save(d / "snapshot.ucls")
    model.save(d / "model.uclm")
    state.control.registry.save(d / "registry.csv")
    with open(d / "hf.csv", "w") as f:
        for k, v in sorted(state.hf.items()):
            f.write(f"{k.hex()},{v}\n")


def load_state(path) -> QueryContext:
    d = Path(path)
    snap = Snapshot.load(d / "snapshot.ucls")
    model = SolverModel.load(d / "model.uclm")
    reg = KeyRegistry.load(d / "registry.csv")
    hf = {}
    with open(d / "hf.csv") as f:
        for line in f:
            k, v = line.strip().split(",")
            hf[bytes.fromhex(k)] = int(v)
    return QueryContext(model, snap, reg.frozen(), hf, model.bucket_len)


def cmd_query(args) -> int:
    ctx = load_state(args.state)
    for lineno, line in enumerate(sys.stdin, 1):
        text = line.strip()
        if not text:
            continue
        try:
            key = bytes.fromhex(text)
        except ValueError:
            print(f"line {lineno}: not a hex key: {text!r}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"{text},{ctx.query(key)}")
    return EXIT_OK


def _bench_plan(args, algorithms, variants) -> ExperimentPlan:
    cfg = resolve_config(args)
    presets = _csv_list(args.preset) if args.preset else None
    return plan_from_config(cfg, _dataset(args, cfg), algorithms, presets=presets,
                            seeds=_seeds(args.seeds, cfg.seed), out=args.out, variants=variants,
                            two_phase=args.two_phase)


def cmd_bench(args) -> int:
    plan = _bench_plan(args, _csv_list(args.algo), ("full",))
    _print_rows(run_plan(plan).rows)
    return EXIT_OK


def cmd_ablate(args) -> int:
    variants = _csv_list(args.variant) if args.variant else list(VARIANTS)
    plan = _bench_plan(args, ["ucl"], variants)
    _print_rows(run_plan(plan).rows)
    return EXIT_OK


def inspect_path(path) -> dict:
    p = Path(path)
    with open(p, "rb") as f:
        head = f.read(4)
    if head == b"UCLS":
        s = Snapshot.load(p)
        return {"kind": "snapshot", "depth": s.depth, "width": s.width, "seq": s.seq,
                "insert_count": s.insert_count, "scale": s.scale, "signed": s.signed,
                "row_sums": s.grid.sum(axis=1).tolist()}
    if head == b"UCLM":
        m = SolverModel.load(p)
        return {"kind": "checkpoint", **{k: v for k, v in m.header().items() if k != "layers"},
                "parameters": m.param_count()}
    if p.suffix == ".json":
        cfg = load_config(p)
        return {"kind": "config", **dataclasses.asdict(cfg)}
    raise ConfigError(f"{p}: unrecognised file (expected snapshot, checkpoint or JSON config)")


def cmd_inspect(args) -> int:
    print(json.dumps(inspect_path(args.path), indent=2, sort_keys=True))
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="uclsketch", description="Sketch ingestion, learned decoding and benchmarks.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, dataset=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help=f"master seed (else $UCL_SEED, config, {DEFAULT_SEED})")
        p.add_argument("--epochs", type=int, help="override training.epochs")
        if dataset:
            p.add_argument("--zipf", help="SKEW:LENGTH[:UNIVERSE] synthetic stream (default 1.3:1000000)")
            p.add_argument("--zipf-seed", type=int, default=1)
            p.add_argument("--trace", help="trace file (.csv, raw; .gz accepted)")
            p.add_argument("--format", choices=("csv", "raw"), default="csv")
            p.add_argument("--no-values", action="store_true", help="trace carries keys only")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("generate", help="write a synthetic Zipf trace")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--zipf", required=True)
    p.add_argument("--zipf-seed", type=int, default=1)
    p.add_argument("--format", choices=("csv", "raw"), default="csv")
    p.add_argument("--no-values", action="store_true")
    p.add_argument("--out", required=True, help="trace path")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("run", help="ingest, train, and report accuracy")
    common(p)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--two-phase", action="store_true", help="ingest fully, then train")
    p.add_argument("--state", help="directory to save snapshot, registry and model for `query`")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("query", help="answer hex keys from stdin using a saved state")
    p.add_argument("--state", required=True)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("bench", help="sweep algorithms x presets x seeds")
    common(p)
    p.add_argument("--preset", help="comma list of presets")
    p.add_argument("--algo", default="ucl,cm", help=f"comma list from {','.join(ALGORITHMS)}")
    p.add_argument("--seeds", help="a count (consecutive from --seed) or a comma list")
    p.add_argument("--two-phase", action="store_true", help="deterministic: ingest fully, then train")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="train ablated variants of the learned decoder")
    common(p)
    p.add_argument("--preset", help="comma list of presets")
    p.add_argument("--variant", help=f"comma list from {','.join(VARIANTS)} (default all)")
    p.add_argument("--seeds")
    p.add_argument("--two-phase", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="describe a snapshot, checkpoint or config file")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TraceError, DivergenceError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
