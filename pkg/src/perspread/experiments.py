"""Monte-Carlo harness: dedicated-sketch trials and desk-scale VI-HLL runs."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .estimator import IntersectionModel, mle_estimate, relative_stderr, union_baseline_estimate
from .hashing import element_key
from .hll import HllSketch, hash_keys, intersect
from .sim import GroundTruth, PowerLaw, Trace, TraceSpec, accuracy, generate_trace
from .virtual import (
    PhysicalRegisterArray,
    SeedTable,
    array_persistent_estimate,
    flow_fingerprints,
    record_batch,
    registers_for_budget,
    slot_indices,
    vi_hll_estimate,
    virtual_indices,
)

ESTIMATORS = ("vi-hll", "i-hll-dedicated", "union-baseline")

# One hundredth of the full-scale reference population: 11,453,043 flows with
# 124,846,736 distinct elements per period; 2 MB of register memory.
DESK_FLOWS = 114_530
DESK_MEMORY_BITS = 2 * 1024 * 1024 * 8 // 100
# Probe flows per trial. Kept light: every flow should be small next to the
# population total, or the whole-array estimate loses its uniform-load footing.
DESK_PROBE_SPREADS = (500,) * 4 + (1000,) * 4 + (5000,) * 2 + (20000,)
# Background spreads for the remaining flows; chosen so that the population
# mean cardinality at SNR = 1 is about 10.9 per flow and period.
DESK_BACKGROUND = PowerLaw(exponent=1.056, minimum=1, maximum=499)


# -- dedicated sketches --------------------------------------------------------------


def dedicated_sketches(rng: np.random.Generator, s: int, t: int, n_star: int, snr: float, h: int = 5):
    """Per-period sketches of one flow with ``n_star`` persistent elements.

    Returns ``(sketches, true_n_star)`` where the truth is the exact size of
    the intersection of the element sets that were recorded.
    """
    persistent = rng.integers(0, 2**64, size=n_star, dtype=np.uint64)
    n_trans = 0 if math.isinf(snr) else int(math.floor(n_star / snr + 0.5))
    sketches, sets = [], []
    for _ in range(t):
        transient = rng.integers(0, 2**64, size=n_trans, dtype=np.uint64)
        sk = HllSketch(s, h)
        elements = np.concatenate([persistent, transient])
        sk.record_keys(elements)
        sketches.append(sk)
        sets.append(elements)
    truth = len(functools.reduce(np.intersect1d, sets))
    return sketches, truth


@dataclass
class TrialResults:
    truth: np.ndarray
    estimate: np.ndarray
    stderr: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    union: np.ndarray | None = None
    predicted_stderr: float = math.nan


def ihll_trials(
    s: int,
    t: int,
    n_star: int,
    snr: float,
    trials: int,
    seed: int = 0,
    h: int = 5,
    with_union: bool = False,
    level: float = 0.95,
) -> TrialResults:
    """Repeated I-HLL estimates on independent dedicated-sketch flows."""
    rng = np.random.default_rng(seed)
    cols = {k: np.empty(trials) for k in ("truth", "estimate", "stderr", "ci_low", "ci_high")}
    union_est = np.empty(trials) if with_union else None
    for i in range(trials):
        sketches, truth = dedicated_sketches(rng, s, t, n_star, snr, h)
        model = IntersectionModel.from_sketches(sketches)
        est = mle_estimate(model, intersect(sketches), level)
        cols["truth"][i] = truth
        cols["estimate"][i] = est.n_star_hat
        cols["stderr"][i] = est.stderr
        cols["ci_low"][i] = est.ci_low
        cols["ci_high"][i] = est.ci_high
        if with_union:
            union_est[i] = union_baseline_estimate(sketches, list(model.n_hat))
    n_true = n_star * (1.0 + (0.0 if math.isinf(snr) else 1.0 / snr))
    predicted = relative_stderr(IntersectionModel(s, [n_true] * t, (1 << h) - 1), n_star)
    return TrialResults(union=union_est, predicted_stderr=predicted, **cols)


# -- virtual arrays over a full trace -------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    memory_bits: int = DESK_MEMORY_BITS
    s: int = 512
    h: int = 5
    t: int = 10
    snr: float = 1.0
    flows: int = DESK_FLOWS
    background: PowerLaw = DESK_BACKGROUND
    probes: tuple = DESK_PROBE_SPREADS
    seed: int = 1
    estimator: str = "vi-hll"
    min_n_star: int = 500

    @property
    def m(self) -> int:
        return registers_for_budget(self.memory_bits, self.h)

    def validate(self) -> None:
        if self.m <= self.s:
            raise ValueError(f"memory budget gives m={self.m} registers, not more than s={self.s}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.estimator == "union-baseline" and self.t > 6:
            raise ValueError("union baseline supports at most 6 periods")
        if self.flows < len(self.probes):
            raise ValueError("flow population smaller than the probe set")

    def trace_spec(self) -> TraceSpec:
        return TraceSpec(
            t=self.t,
            flow_count=self.flows - len(self.probes),
            distribution=self.background,
            spreads=self.probes,
            snr=self.snr,
            seed=self.seed,
        )


@dataclass
class FlowResults:
    """Per-flow outcome of one experiment (only flows with ``n* >= min_n_star``)."""

    labels: list
    n_star: np.ndarray
    estimate: np.ndarray
    stderr: np.ndarray
    extra: dict = field(default_factory=dict)


def record_trace(trace: Trace, m: int, h: int, seeds: SeedTable) -> list:
    """Physical arrays for every period of a trace."""
    fps = flow_fingerprints(np.array([element_key(lab) for lab in trace.labels], dtype=np.uint64))
    arrays = []
    for j in range(trace.t):
        arr = PhysicalRegisterArray(m, h, period_id=j + 1)
        record_batch(arr, fps[trace.flows[j]], trace.elements[j], seeds)
        arrays.append(arr)
    return arrays


def _dedicated_for_flows(trace: Trace, selected: np.ndarray, s: int, h: int) -> dict:
    sketches = {int(f): [] for f in selected}
    for j in range(trace.t):
        mask = np.isin(trace.flows[j], selected)
        flows, elems = trace.flows[j][mask], trace.elements[j][mask]
        order = np.argsort(flows, kind="stable")
        flows, elems = flows[order], elems[order]
        bounds = np.searchsorted(flows, selected)
        ends = np.searchsorted(flows, selected, side="right")
        for f, lo, hi in zip(selected.tolist(), bounds, ends):
            sk = HllSketch(s, h)
            sk.record_keys(elems[lo:hi])
            sketches[f].append(sk)
    return sketches


def run_experiment(config: ExperimentConfig, trace_and_truth=None) -> FlowResults:
    """Generate (or reuse) a trace, record it, and estimate every flow with ``n* >= min_n_star``."""
    config.validate()
    trace, truth = trace_and_truth or generate_trace(config.trace_spec())
    selected = np.flatnonzero(truth.n_star >= config.min_n_star)
    labels = [truth.labels[i] for i in selected]
    estimates = np.empty(len(selected))
    stderrs = np.empty(len(selected))
    extra: dict = {}
    if config.estimator == "vi-hll":
        seeds = SeedTable.generate(config.s, config.seed ^ 0x5EED)
        arrays = record_trace(trace, config.m, config.h, seeds)
        background = array_persistent_estimate(arrays)
        n_s = np.empty(len(selected))
        for i, lab in enumerate(labels):
            est = vi_hll_estimate(arrays, lab, seeds, background=background)
            estimates[i], stderrs[i], n_s[i] = est.n_star_hat, est.stderr, est.n_s_hat
        extra.update(n_s_hat=n_s, n_u_hat=background.n_star_hat, n_u_true=int(truth.n_star.sum()), m=config.m)
    else:
        sketches = _dedicated_for_flows(trace, selected, config.s, config.h)
        for i, f in enumerate(selected.tolist()):
            sks = sketches[f]
            if config.estimator == "i-hll-dedicated":
                est = mle_estimate(IntersectionModel.from_sketches(sks), intersect(sks))
                estimates[i], stderrs[i] = est.n_star_hat, est.stderr
            else:
                estimates[i], stderrs[i] = union_baseline_estimate(sks), math.nan
    return FlowResults(labels, truth.n_star[selected].astype(np.float64), estimates, stderrs, extra)


def run_trials(config: ExperimentConfig, trials: int) -> FlowResults:
    """Pool per-flow results over independent seeds ``config.seed + i``."""
    parts = [run_experiment(replace(config, seed=config.seed + i)) for i in range(trials)]
    return FlowResults(
        sum((p.labels for p in parts), []),
        np.concatenate([p.n_star for p in parts]),
        np.concatenate([p.estimate for p in parts]),
        np.concatenate([p.stderr for p in parts]),
        {"runs": [p.extra for p in parts]},
    )


# -- noise accounting ---------------------------------------------------------------------


def noise_counts(truth: GroundTruth, flows: np.ndarray, s: int, m: int, seeds: SeedTable) -> np.ndarray:
    """Other flows' persistent elements hashed into each queried flow's view.

    A physical slot appearing twice in a view counts its elements twice, as
    the virtual sketch sees them in two registers.
    """
    fps = flow_fingerprints(np.array([element_key(lab) for lab in truth.labels], dtype=np.uint64))
    p, _ = hash_keys(truth.persistent_elements, seeds.b)
    slots = slot_indices(fps[truth.persistent_flows], p, seeds, m)
    load = np.bincount(slots, minlength=m)
    out = np.empty(len(flows), dtype=np.int64)
    for i, f in enumerate(flows.tolist()):
        view = virtual_indices(truth.labels[f], seeds, m)
        own = np.bincount(slots[truth.persistent_flows == f], minlength=m)
        out[i] = int((load[view] - own[view]).sum())
    return out


def bucket_rows(n_star: np.ndarray, estimates: np.ndarray, edges) -> list:
    """Per-bucket relative bias and standard error over ``[edges[i], edges[i+1])``."""
    rows = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (n_star >= lo) & (n_star < hi)
        if sel.sum() == 0:
            continue
        acc = accuracy(estimates[sel], n_star[sel])
        rows.append({"lo": lo, "hi": hi, "bias": acc.bias, "stderr": acc.stderr, "count": acc.count})
    return rows
