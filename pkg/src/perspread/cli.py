"""Command-line front end: generate, record, query, evaluate, sweep.

Every subcommand is a pure function of its input files and flags. Output is
CSV with a header row:

  query     flow,n_star_hat,stderr,ci_low,ci_high,flags
  evaluate  metrics.csv  lo,hi,count,excluded,bias,stderr
            scatter.csv  flow,n_star,n_star_hat
  sweep     one metrics CSV per grid point plus index.csv

``flags`` is a ``;``-joined subset of ``boundary`` (likelihood maximized at a
domain end), ``clamped`` (noise correction went negative and was set to 0)
and ``noise`` (the interval reaches 0, so the flow is not distinguishable
from the shared-register noise).

Failures print ``perspread: error[<class>]: <detail>`` on one line and exit
with the class's code.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import store
from .experiments import (
    DESK_BACKGROUND,
    DESK_FLOWS,
    DESK_MEMORY_BITS,
    DESK_PROBE_SPREADS,
    ESTIMATORS,
    ExperimentConfig,
    bucket_rows,
    run_trials,
)
from .hashing import element_key
from .sim import PowerLaw, TraceSpec, generate_trace, iter_trace_chunks, read_trace_header, read_truth, write_trace, write_truth
from .virtual import (
    PERIOD_CARDINALITY_MODES,
    PhysicalRegisterArray,
    SeedTable,
    array_persistent_estimate,
    flow_fingerprints,
    record_batch,
    registers_for_budget,
    vi_hll_estimate,
)

DEFAULT_EDGES = (1, 500, 1000, 5000, 20000, math.inf)


class CliError(Exception):
    kind = "error"
    code = 1


class MissingFile(CliError):
    kind, code = "missing-file", 3


class ParameterMismatch(CliError):
    kind, code = "parameter-mismatch", 4


class InfeasibleConfig(CliError):
    kind, code = "infeasible-config", 5


class InvalidInput(CliError):
    kind, code = "invalid-input", 6


# -- argument helpers ---------------------------------------------------------------


def _floats(text: str) -> list:
    return [math.inf if v.strip() in ("inf", "infinity") else float(v) for v in text.split(",")]


def _ints(text: str) -> list:
    return [int(v) for v in text.split(",")]


def _spreads(text: str) -> tuple:
    """``"500x4,20000"`` -> ``(500, 500, 500, 500, 20000)``."""
    if not text:
        return ()
    out = []
    for part in text.split(","):
        value, _, count = part.partition("x")
        out.extend([int(value)] * (int(count) if count else 1))
    return tuple(out)


def _need(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    return path


def _config(args, **overrides) -> ExperimentConfig:
    cfg = ExperimentConfig(
        memory_bits=args.memory_bits,
        s=args.s,
        h=args.h,
        t=args.t,
        snr=args.snr,
        flows=args.flows,
        background=PowerLaw(*args.background),
        probes=args.probes,
        seed=args.seed,
        estimator=args.estimator,
        min_n_star=args.min_n_star,
    )
    cfg = replace(cfg, **overrides)
    _check_feasible(cfg.memory_bits, cfg.s, cfg.h, cfg.t)
    try:
        cfg.validate()
    except ValueError as exc:
        raise InfeasibleConfig(str(exc)) from None
    return cfg


def _check_feasible(memory_bits: int, s: int, h: int, t: int | None = None) -> int:
    if s < 16 or s & (s - 1):
        raise InfeasibleConfig(f"s={s} must be a power of two >= 16")
    if not 1 <= h <= 8:
        raise InfeasibleConfig(f"h={h} must lie in 1..8")
    if t is not None and t < 2:
        raise InfeasibleConfig(f"t={t}: persistence needs at least two periods")
    m = registers_for_budget(memory_bits, h)
    if m <= s:
        raise InfeasibleConfig(f"memory {memory_bits} bits gives m={m} registers, need m > s={s}")
    return m


def _write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.6g}"


# -- subcommands --------------------------------------------------------------------


def cmd_generate(args) -> None:
    snr = args.snr_schedule if args.snr_schedule else args.snr
    flows = args.flows - len(args.probes)
    if flows < 0:
        raise InfeasibleConfig(f"--flows {args.flows} is smaller than the {len(args.probes)} probe flows")
    try:
        spec = TraceSpec(
            t=args.t,
            flow_count=flows,
            distribution=PowerLaw(*args.background),
            spreads=args.probes,
            snr=tuple(snr) if isinstance(snr, list) else snr,
            element_bits=args.element_bits,
            seed=args.seed,
        )
        spec.snr_schedule
    except ValueError as exc:
        raise InfeasibleConfig(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace, truth = generate_trace(spec)
    write_trace(trace, out / "trace.tsv")
    write_truth(truth, out / "truth.tsv")


def cmd_record(args) -> None:
    trace_path = _need(args.trace)
    m = _check_feasible(args.memory_bits, args.s, args.h)
    try:
        t = read_trace_header(trace_path)
    except ValueError as exc:
        raise InvalidInput(str(exc)) from None
    seeds = SeedTable.generate(args.s, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []

    def flush(arr):
        path = out / f"period_{arr.period_id:03d}.psrd"
        store.save(arr, path, seeds)
        paths.append(path)

    # One array in memory at a time; periods with no records still get one.
    current = PhysicalRegisterArray(m, args.h, period_id=1)
    try:
        for period, flows, elems in iter_trace_chunks(trace_path):
            while period > current.period_id:
                flush(current)
                current = PhysicalRegisterArray(m, args.h, period_id=current.period_id + 1)
            fp_of = {lab: element_key(lab) for lab in set(flows)}
            fps = flow_fingerprints(np.fromiter((fp_of[f] for f in flows), dtype=np.uint64, count=len(flows)))
            record_batch(current, fps, np.asarray(elems, dtype=np.uint64), seeds)
    except (ValueError, OverflowError) as exc:
        raise InvalidInput(str(exc)) from None
    flush(current)
    while current.period_id < t:
        current = PhysicalRegisterArray(m, args.h, period_id=current.period_id + 1)
        flush(current)
    store.write_manifest(store.manifest(paths, seeds), out / "manifest.json")


def _load_manifest(path):
    path = _need(path)
    try:
        man = store.read_manifest(path)
        arrays = man.load_arrays()
    except FileNotFoundError as exc:
        raise MissingFile(str(exc)) from None
    except store.ManifestError as exc:
        raise ParameterMismatch(str(exc)) from None
    except (store.SnapshotError, ValueError, KeyError) as exc:
        raise InvalidInput(f"{path}: {exc}") from None
    if len(arrays) < 2:
        raise InfeasibleConfig("a persistence query needs snapshots from at least two periods")
    if man.m <= man.seeds.s:
        raise InfeasibleConfig(f"m={man.m} does not exceed s={man.seeds.s}")
    return man, arrays


def query_rows(arrays, seeds, flows, level=0.95, period_cardinality="sketch"):
    background = array_persistent_estimate(arrays, level)
    for flow in flows:
        est = vi_hll_estimate(
            arrays, flow, seeds, background=background, period_cardinality=period_cardinality, level=level
        )
        flags = []
        if est.boundary:
            flags.append("boundary")
        if est.clamped:
            flags.append("clamped")
        if est.clamped or not est.ci_low > 0:
            flags.append("noise")
        yield flow, est, ";".join(flags)


def _read_flow_list(args) -> list:
    flows = list(args.flow)
    if args.flow_file:
        text = _need(args.flow_file).read_text(encoding="utf-8")
        flows.extend(line.split("\t")[0].strip() for line in text.splitlines() if line.strip() and not line.startswith("#"))
    if not flows:
        raise InvalidInput("no flows to query")
    return flows


def cmd_query(args) -> None:
    man, arrays = _load_manifest(args.manifest)
    rows = [
        [flow, _fmt(e.n_star_hat), _fmt(e.stderr), _fmt(e.ci_low), _fmt(e.ci_high), flags]
        for flow, e, flags in query_rows(arrays, man.seeds, _read_flow_list(args), args.level, args.period_cardinality)
    ]
    _write_csv(args.out, ["flow", "n_star_hat", "stderr", "ci_low", "ci_high", "flags"], rows)


def read_estimates(path) -> dict:
    """Flow -> estimate, from a query CSV or from a truth file (second column)."""
    lines = _need(path).read_text(encoding="utf-8").splitlines()
    out = {}
    if lines and lines[0].startswith("flow,"):
        for row in csv.DictReader(lines):
            out[row["flow"]] = float(row["n_star_hat"])
        return out
    for lineno, line in enumerate(lines, start=1):
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            raise InvalidInput(f"{path}:{lineno}: expected flow and estimate")
        out[parts[0]] = float(parts[1])
    return out


def _edges(text: str | None) -> tuple:
    return tuple(_floats(text)) if text else DEFAULT_EDGES


def _metrics(n_star, estimates, edges) -> list:
    rows = []
    for r in bucket_rows(np.asarray(n_star, float), np.asarray(estimates, float), edges):
        rows.append([_fmt(r["lo"]), _fmt(r["hi"]), r["count"], 0, _fmt(r["bias"]), _fmt(r["stderr"])])
    excluded = int(np.sum(np.asarray(n_star) == 0))
    if excluded:
        rows.append(["0", "0", 0, excluded, "nan", "nan"])
    return rows


METRIC_HEADER = ["lo", "hi", "count", "excluded", "bias", "stderr"]


def cmd_evaluate(args) -> None:
    try:
        truth = read_truth(_need(args.truth))
    except ValueError as exc:
        raise InvalidInput(str(exc)) from None
    if (args.manifest is None) == (args.estimates is None):
        raise InvalidInput("give exactly one of --manifest and --estimates")
    keep = [i for i, n in enumerate(truth.n_star.tolist()) if n >= args.min_n_star]
    labels = [truth.labels[i] for i in keep]
    if args.manifest is not None:
        man, arrays = _load_manifest(args.manifest)
        if man.t != truth.n_period.shape[1]:
            raise ParameterMismatch(f"manifest has {man.t} periods, truth has {truth.n_period.shape[1]}")
        est = {f: e.n_star_hat for f, e, _ in query_rows(arrays, man.seeds, labels, args.level)}
    else:
        est = read_estimates(args.estimates)
        missing = [f for f in labels if f not in est]
        if missing:
            raise ParameterMismatch(f"{len(missing)} truth flows have no estimate, first {missing[0]!r}")
    n_star = truth.n_star[keep]
    values = np.array([est[f] for f in labels], dtype=float)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "metrics.csv", METRIC_HEADER, _metrics(n_star, values, _edges(args.edges)))
    _write_csv(
        out / "scatter.csv",
        ["flow", "n_star", "n_star_hat"],
        [[f, int(n), _fmt(v)] for f, n, v in zip(labels, n_star.tolist(), values)],
    )


def cmd_sweep(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = list(itertools.product(args.memory_bits, args.t, args.snr, args.s))
    configs = []
    for mem, t, snr, s in grid:
        configs.append(
            _config(args, memory_bits=mem, t=t, snr=snr, s=s)
        )
    edges = _edges(args.edges)
    index = []
    for cfg in configs:
        name = f"M{cfg.memory_bits}_t{cfg.t}_snr{_fmt(cfg.snr)}_s{cfg.s}.csv"
        res = run_trials(cfg, args.trials)
        _write_csv(out / name, METRIC_HEADER, _metrics(res.n_star, res.estimate, edges))
        index.append([name, cfg.memory_bits, cfg.m, cfg.t, _fmt(cfg.snr), cfg.s, cfg.h, cfg.estimator, args.trials])
    _write_csv(out / "index.csv", ["file", "memory_bits", "m", "t", "snr", "s", "h", "estimator", "trials"], index)


# -- parser -------------------------------------------------------------------------


def _add_population(p, t_type=int, snr_type=float, mem_type=int, s_type=int) -> None:
    p.add_argument("--t", type=t_type, default=10 if t_type is int else [10], help="periods")
    p.add_argument("--snr", type=snr_type, default=1.0 if snr_type is float else [1.0], help="persistent / transient ratio")
    p.add_argument("--flows", type=int, default=DESK_FLOWS, help="total flow population, probes included")
    p.add_argument(
        "--probes",
        type=_spreads,
        default=DESK_PROBE_SPREADS,
        help="explicit persistent spreads, e.g. 500x4,20000 (default: the desk probe set)",
    )
    p.add_argument(
        "--background",
        type=lambda v: tuple(float(x) if i == 0 else int(x) for i, x in enumerate(v.split(","))),
        default=(DESK_BACKGROUND.exponent, DESK_BACKGROUND.minimum, DESK_BACKGROUND.maximum),
        metavar="EXP,MIN,MAX",
        help="power law of background persistent spreads",
    )
    p.add_argument("--seed", type=int, default=1)


def _add_memory(p, many=False) -> None:
    conv = _ints if many else int
    p.add_argument("--memory-bits", type=conv, default=[DESK_MEMORY_BITS] if many else DESK_MEMORY_BITS)
    p.add_argument("--s", type=conv, default=[512] if many else 512, help="virtual sketch size (power of two)")
    p.add_argument("--h", type=int, default=5, help="register width in bits")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="perspread", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthetic trace plus ground truth (trace.tsv, truth.tsv)")
    _add_population(p)
    p.add_argument("--snr-schedule", type=_floats, help="one SNR per period, overrides --snr")
    p.add_argument("--element-bits", type=int, default=64)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("record", help="one pass over a trace into per-period snapshots and manifest.json")
    p.add_argument("trace")
    _add_memory(p)
    p.add_argument("--seed", type=int, default=1, help="master seed of the seed table")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_record)

    p = sub.add_parser("query", help="persistent spread of listed flows")
    p.add_argument("manifest")
    p.add_argument("flow", nargs="*", help="flow labels")
    p.add_argument("--flow-file", help="file with one flow label per line (first tab field)")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--period-cardinality", choices=PERIOD_CARDINALITY_MODES, default="sketch")
    p.add_argument("--out", default="/dev/stdout", help="CSV path")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("evaluate", help="per-bucket accuracy against ground truth")
    p.add_argument("--truth", required=True)
    p.add_argument("--manifest")
    p.add_argument("--estimates", help="query CSV or truth-format file")
    p.add_argument("--min-n-star", type=int, default=1)
    p.add_argument("--edges", help="bucket edges on true n*, e.g. 500,1000,inf")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="Monte-Carlo grid over memory, t, SNR and s (comma lists)")
    _add_memory(p, many=True)
    _add_population(p, t_type=_ints, snr_type=_floats)
    p.add_argument("--estimator", choices=ESTIMATORS, default="vi-hll")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--min-n-star", type=int, default=500)
    p.add_argument("--edges", help="bucket edges on true n*")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except CliError as exc:
        print(f"perspread: error[{exc.kind}]: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"perspread: error[io]: {exc}", file=sys.stderr)
        return 7
    return 0


if __name__ == "__main__":
    sys.exit(main())
