"""Synthetic multi-period traces with exact ground truth.

Each flow owns a persistent element set emitted in every period, plus a
fresh transient set per period sized by the period's signal-to-noise ratio
(``transients = round(n* / SNR)``). Transients avoid the flow's persistent
set and repeat no element within a period, but are drawn independently
across periods, so an element may by chance be transient in several
periods; the reported ``n*`` counts such coincidences exactly.

Traces are held column-wise (one flow-index array and one element array per
period) because realistic populations run to millions of records.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)

TRACE_HEADER = "#spread-trace v1"


@dataclass(frozen=True)
class PowerLaw:
    """Truncated discrete power law: ``P(n >= x) ~ x**-exponent`` on ``[minimum, maximum]``."""

    exponent: float = 1.2
    minimum: int = 1
    maximum: int = 10_000

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.exponent <= 0 or not 1 <= self.minimum <= self.maximum:
            raise ValueError(f"invalid power law {self}")
        u = rng.random(size)
        ratio = (self.minimum / (self.maximum + 1)) ** self.exponent
        x = self.minimum * (1.0 - u * (1.0 - ratio)) ** (-1.0 / self.exponent)
        return np.minimum(np.floor(x), self.maximum).astype(np.int64)


@dataclass(frozen=True)
class TraceSpec:
    """Parameters of a synthetic trace.

    ``flow_count`` flows draw their persistent spread from ``distribution``;
    ``spreads`` appends flows with explicitly chosen spreads. ``snr`` is one
    value for every period or one per period (``math.inf`` means no
    transients).
    """

    t: int = 10
    flow_count: int = 0
    distribution: PowerLaw | None = None
    spreads: tuple = ()
    snr: float | tuple = 1.0
    element_bits: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "spreads", tuple(int(v) for v in self.spreads))
        if self.t < 1:
            raise ValueError("need at least one period")
        if self.flow_count < 0 or self.flow_count + len(self.spreads) < 1:
            raise ValueError("need at least one flow")
        if self.flow_count and self.distribution is None:
            raise ValueError("flow_count > 0 requires a distribution")
        if any(v < 0 for v in self.spreads):
            raise ValueError("spreads must be non-negative")
        if any(not v > 0 for v in self.snr_schedule):
            raise ValueError("SNR must be positive")
        if not 1 <= self.element_bits <= 64:
            raise ValueError("element_bits must lie in 1..64")

    @property
    def snr_schedule(self) -> tuple:
        if isinstance(self.snr, (int, float)):
            return (float(self.snr),) * self.t
        if len(self.snr) != self.t:
            raise ValueError(f"SNR schedule has {len(self.snr)} entries for {self.t} periods")
        return tuple(float(v) for v in self.snr)


class TraceRecord(NamedTuple):
    period: int
    flow: str
    element: int


@dataclass
class GroundTruth:
    labels: list
    n_star: np.ndarray
    n_period: np.ndarray  # shape (flows, t)
    persistent_flows: np.ndarray | None = None
    persistent_elements: np.ndarray | None = None

    def as_dict(self) -> dict:
        return {lab: (int(ns), [int(v) for v in row]) for lab, ns, row in zip(self.labels, self.n_star, self.n_period)}


@dataclass
class Trace:
    t: int
    labels: list
    flows: list = field(default_factory=list)  # per period: int64 flow indices
    elements: list = field(default_factory=list)  # per period: uint64 element ids

    def __len__(self):
        return sum(len(f) for f in self.flows)

    def records(self) -> Iterator[TraceRecord]:
        for j in range(self.t):
            labels = self.labels
            for f, e in zip(self.flows[j].tolist(), self.elements[j].tolist()):
                yield TraceRecord(j + 1, labels[f], e)


def flow_label(index: int) -> str:
    return f"10.{(index >> 16) & 255}.{(index >> 8) & 255}.{index & 255}"


def _rounded(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5).astype(np.int64)


def _draw_distinct(rng, owners: np.ndarray, domain: int, forbid_owners=None, forbid_elems=None) -> np.ndarray:
    """One element per entry of ``owners``; no repeats per owner, none in the forbidden pairs."""
    elems = rng.integers(0, domain, size=len(owners), dtype=np.uint64)
    if forbid_owners is None:
        forbid_owners = np.empty(0, dtype=np.int64)
        forbid_elems = np.empty(0, dtype=np.uint64)
    n_forbid = len(forbid_owners)
    all_owners = np.concatenate([forbid_owners, owners])
    tag = np.concatenate([np.zeros(n_forbid, np.int8), np.ones(len(owners), np.int8)])
    while True:
        all_elems = np.concatenate([forbid_elems, elems])
        # A pair can only clash if its element value repeats somewhere, which
        # is rare for wide domains; sort the full pairs only for those.
        cand = np.flatnonzero(np.isin(all_elems, _repeated(all_elems, 2)))
        if not len(cand):
            return elems
        order = cand[np.lexsort((tag[cand], all_elems[cand], all_owners[cand]))]
        so, se = all_owners[order], all_elems[order]
        clash = np.zeros(len(order), dtype=bool)
        clash[1:] = (so[1:] == so[:-1]) & (se[1:] == se[:-1])
        if not clash.any():
            return elems
        redo = order[clash] - n_forbid
        elems[redo] = rng.integers(0, domain, size=len(redo), dtype=np.uint64)


def _repeated(values: np.ndarray, times: int) -> np.ndarray:
    """Distinct values occurring at least ``times`` times."""
    uniq, counts = np.unique(values, return_counts=True)
    return uniq[counts >= times]


def _count_full_runs(owners_per_period: Sequence[np.ndarray], elems_per_period: Sequence[np.ndarray], n_flows: int, t: int):
    """Per flow, the number of ``(flow, element)`` pairs present in all ``t`` lists."""
    owners = np.concatenate(owners_per_period)
    elems = np.concatenate(elems_per_period)
    keep = np.isin(elems, _repeated(elems, t))
    owners, elems = owners[keep], elems[keep]
    if not len(owners):
        return np.zeros(n_flows, dtype=np.int64)
    order = np.lexsort((elems, owners))
    so, se = owners[order], elems[order]
    starts = np.ones(len(order), dtype=bool)
    starts[1:] = (so[1:] != so[:-1]) | (se[1:] != se[:-1])
    start_idx = np.flatnonzero(starts)
    run_len = np.diff(np.append(start_idx, len(order)))
    full = start_idx[run_len == t]
    return np.bincount(so[full], minlength=n_flows).astype(np.int64)


def generate_trace(spec: TraceSpec) -> tuple[Trace, GroundTruth]:
    """Build the trace and its exact ground truth. Deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    background = spec.distribution.sample(rng, spec.flow_count) if spec.flow_count else np.empty(0, np.int64)
    n_target = np.concatenate([background, np.asarray(spec.spreads, dtype=np.int64)])
    n_flows = len(n_target)
    snrs = spec.snr_schedule
    n_trans = np.stack(
        [np.zeros(n_flows, np.int64) if math.isinf(r) else _rounded(n_target / r) for r in snrs], axis=1
    )
    domain = 1 << spec.element_bits
    if np.any(n_target + n_trans.max(axis=1) > domain):
        raise ValueError(f"flow sizes exceed the {spec.element_bits}-bit element domain")

    flow_idx = np.arange(n_flows, dtype=np.int64)
    p_owner = np.repeat(flow_idx, n_target)
    p_elem = _draw_distinct(rng, p_owner, domain)

    labels = [flow_label(i) for i in range(n_flows)]
    trace = Trace(spec.t, labels)
    t_owners, t_elems = [], []
    for j in range(spec.t):
        owner = np.repeat(flow_idx, n_trans[:, j])
        elem = _draw_distinct(rng, owner, domain, p_owner, p_elem)
        t_owners.append(owner)
        t_elems.append(elem)
        flows = np.concatenate([p_owner, owner])
        elems = np.concatenate([p_elem, elem])
        perm = rng.permutation(len(flows))
        trace.flows.append(flows[perm])
        trace.elements.append(elems[perm])

    coincidental = _count_full_runs(t_owners, t_elems, n_flows, spec.t)
    truth = GroundTruth(labels, n_target + coincidental, n_target[:, None] + n_trans, p_owner, p_elem)
    return trace, truth


# -- exact oracles -------------------------------------------------------------------


def exact_persistent_spread(records: Iterable, flow) -> int:
    """``|S_1 ∩ ... ∩ S_t|`` for one flow, from ``(period, flow, element)`` records."""
    per_period: dict[int, set] = {}
    for period, f, element in records:
        if f == flow:
            per_period.setdefault(period, set()).add(element)
        else:
            per_period.setdefault(period, set())
    if not per_period:
        return 0
    sets = [per_period[p] for p in sorted(per_period)]
    return len(set.intersection(*sets))


def exact_spreads(trace: Trace) -> tuple[np.ndarray, np.ndarray]:
    """Exact ``n*`` and per-period distinct counts for every flow of a trace."""
    n_flows = len(trace.labels)
    n_period = np.zeros((n_flows, trace.t), dtype=np.int64)
    owners, elems = [], []
    for j in range(trace.t):
        pairs = np.unique(np.stack([trace.flows[j].astype(np.uint64), trace.elements[j]]), axis=1)
        owners.append(pairs[0].astype(np.int64))
        elems.append(pairs[1])
        n_period[:, j] = np.bincount(owners[-1], minlength=n_flows)
    return _count_full_runs(owners, elems, n_flows, trace.t), n_period


# -- accuracy metrics ---------------------------------------------------------------------


class Accuracy(NamedTuple):
    bias: float
    stderr: float
    count: int
    excluded: int


def accuracy(estimates, truths) -> Accuracy:
    """Relative bias ``E(est/true) - 1`` and relative standard error ``sd(est/true)``.

    Pairs with a zero truth are excluded and counted.
    """
    est = np.asarray(estimates, dtype=np.float64)
    tru = np.asarray(truths, dtype=np.float64)
    if est.shape != tru.shape:
        raise ValueError("estimates and truths must pair up")
    if est.size == 0:
        raise ValueError("no estimates given")
    keep = tru != 0
    excluded = int(est.size - keep.sum())
    if excluded:
        log.info("excluded %d pairs with zero truth", excluded)
    if not keep.any():
        raise ValueError("every truth is zero")
    ratios = est[keep] / tru[keep]
    sd = float(np.std(ratios, ddof=1)) if ratios.size > 1 else 0.0
    return Accuracy(float(np.mean(ratios) - 1.0), sd, int(ratios.size), excluded)


def relative_bias(estimates, truths) -> float:
    return accuracy(estimates, truths).bias


def relative_stderr(estimates, truths) -> float:
    return accuracy(estimates, truths).stderr


# -- files ----------------------------------------------------------------------------


def write_trace(trace: Trace, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{TRACE_HEADER} t={trace.t}\n")
        labels = np.asarray(trace.labels, dtype=object)
        for j in range(trace.t):
            prefix = f"{j + 1}\t"
            lines = [
                f"{prefix}{lab}\t{e}\n"
                for lab, e in zip(labels[trace.flows[j]].tolist(), trace.elements[j].tolist())
            ]
            fh.writelines(lines)


def read_trace_header(path) -> int:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
    if not first.startswith(TRACE_HEADER):
        raise ValueError(f"{path}: not a spread trace (bad header {first!r})")
    try:
        return int(first.split("t=")[1])
    except (IndexError, ValueError):
        raise ValueError(f"{path}: header lacks t=<periods>") from None


def iter_trace_chunks(path, chunk_size: int = 1 << 16) -> Iterator[tuple[int, list, list]]:
    """Stream ``(period, flows, elements)`` chunks; a chunk never spans two periods."""
    t = read_trace_header(path)
    last = 0
    with open(path, encoding="utf-8") as fh:
        fh.readline()
        flows, elems, period = [], [], None
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            p = int(parts[0])
            if p != period:
                if flows:
                    yield period, flows, elems
                    flows, elems = [], []
                if p < last or not 1 <= p <= t:
                    raise ValueError(f"{path}:{lineno}: periods must be contiguous and within 1..{t}")
                period = last = p
            flows.append(parts[1])
            elems.append(int(parts[2]))
            if len(flows) >= chunk_size:
                yield period, flows, elems
                flows, elems = [], []
        if flows:
            yield period, flows, elems


def read_trace_records(path) -> Iterator[TraceRecord]:
    for period, flows, elems in iter_trace_chunks(path):
        for f, e in zip(flows, elems):
            yield TraceRecord(period, f, e)


def write_truth(truth: GroundTruth, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for lab, ns, row in zip(truth.labels, truth.n_star.tolist(), truth.n_period.tolist()):
            fh.write(f"{lab}\t{ns}\t{','.join(map(str, row))}\n")


def read_truth(path) -> GroundTruth:
    labels, n_star, rows = [], [], []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected flow, n_star, n_1..n_t")
        labels.append(parts[0])
        n_star.append(int(parts[1]))
        rows.append([int(v) for v in parts[2].split(",")])
    return GroundTruth(labels, np.asarray(n_star, dtype=np.int64), np.asarray(rows, dtype=np.int64))
