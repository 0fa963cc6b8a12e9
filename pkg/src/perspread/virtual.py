"""Virtual HLL sketches carved out of a shared physical register array.

Every flow owns ``s`` pseudo-randomly chosen slots of an ``m``-register
array. Slot ``i`` of flow ``f`` is ``hash(fingerprint(f) ^ seeds[i]) mod m``,
so a single seed table (shared by all periods and by the query side) fixes
every flow's view. Other flows' elements landing in those slots are noise;
the persistent part of that noise is removed by comparing the flow's
intersection estimate against the whole-array intersection estimate.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .estimator import (
    IntersectionModel,
    PersistentEstimate,
    mle_estimate,
    psi_squared,
)
from .hashing import FLOW_SEED, INDEX_SEED, element_key, hash64, hash64_array
from .hll import DEFAULT_REGISTER_BITS, HllSketch, estimate_registers, hash_element, hash_keys, rho


class ModelInvalidError(ValueError):
    """The closed-form error model has no real solution for these inputs."""


@dataclass(frozen=True, eq=False)
class SeedTable:
    seeds: np.ndarray

    def __post_init__(self):
        seeds = np.asarray(self.seeds, dtype=np.uint64)
        if len(np.unique(seeds)) != len(seeds):
            raise ValueError("seed table entries must be pairwise distinct")
        object.__setattr__(self, "seeds", seeds)

    @classmethod
    def generate(cls, s: int, master_seed: int) -> SeedTable:
        rng = np.random.default_rng(master_seed)
        while True:
            seeds = rng.integers(0, 2**64, size=s, dtype=np.uint64)
            if len(np.unique(seeds)) == s:
                return cls(seeds)

    @property
    def s(self) -> int:
        return len(self.seeds)

    @property
    def b(self) -> int:
        return self.s.bit_length() - 1

    def digest(self) -> bytes:
        """8-byte fingerprint used to match snapshots to a seed table."""
        return hashlib.blake2b(self.seeds.astype("<u8").tobytes(), digest_size=8).digest()

    def __eq__(self, other):
        return isinstance(other, SeedTable) and np.array_equal(self.seeds, other.seeds)

    def __len__(self):
        return self.s


@dataclass(eq=False)
class PhysicalRegisterArray:
    """``m`` shared registers recording every flow during one period."""

    m: int
    h: int = DEFAULT_REGISTER_BITS
    period_id: int = 0
    registers: np.ndarray | None = None

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("array needs at least one register")
        if self.registers is None:
            self.registers = np.zeros(self.m, dtype=np.uint8)
        else:
            regs = np.asarray(self.registers)
            if regs.shape != (self.m,):
                raise ValueError(f"expected {self.m} registers, got shape {regs.shape}")
            if regs.size and int(regs.max()) > self.cap:
                raise ValueError(f"register value exceeds cap {self.cap}")
            self.registers = regs.astype(np.uint8)

    @property
    def cap(self) -> int:
        return (1 << self.h) - 1

    @property
    def memory_bits(self) -> int:
        return self.m * self.h

    def __eq__(self, other):
        if not isinstance(other, PhysicalRegisterArray):
            return NotImplemented
        return (self.m, self.h, self.period_id) == (other.m, other.h, other.period_id) and np.array_equal(
            self.registers, other.registers
        )

    def copy(self) -> PhysicalRegisterArray:
        return PhysicalRegisterArray(self.m, self.h, self.period_id, self.registers.copy())


def registers_for_budget(memory_bits: int, h: int = DEFAULT_REGISTER_BITS) -> int:
    return memory_bits // h


def flow_fingerprint(flow) -> int:
    return hash64(element_key(flow), FLOW_SEED)


def flow_fingerprints(flow_keys: np.ndarray) -> np.ndarray:
    return hash64_array(flow_keys, FLOW_SEED)


def virtual_indices(flow, seeds: SeedTable, m: int) -> np.ndarray:
    """Physical slots of the flow's ``s`` virtual registers."""
    if seeds.s > m:
        raise ValueError(f"virtual size {seeds.s} exceeds array size {m}")
    fp = np.uint64(flow_fingerprint(flow))
    return (hash64_array(seeds.seeds ^ fp, INDEX_SEED) % np.uint64(m)).astype(np.int64)


def slot_indices(fingerprints: np.ndarray, p: np.ndarray, seeds: SeedTable, m: int) -> np.ndarray:
    """Vectorized slot lookup ``hash(fp ^ seeds[p]) mod m``."""
    mixed = np.asarray(fingerprints, dtype=np.uint64) ^ seeds.seeds[p]
    return (hash64_array(mixed, INDEX_SEED) % np.uint64(m)).astype(np.int64)


def record(array: PhysicalRegisterArray, flow, element, seeds: SeedTable) -> PhysicalRegisterArray:
    p, q, width = hash_element(element, seeds.b)
    fp = flow_fingerprint(flow)
    slot = hash64(fp ^ int(seeds.seeds[p]), INDEX_SEED) % array.m
    value = min(rho(q, width), array.cap)
    if value > array.registers[slot]:
        array.registers[slot] = value
    return array


def record_batch(array: PhysicalRegisterArray, fingerprints: np.ndarray, element_keys: np.ndarray, seeds: SeedTable):
    """Record many ``(flow fingerprint, element key)`` pairs in one pass."""
    p, r = hash_keys(element_keys, seeds.b)
    slots = slot_indices(fingerprints, p, seeds, array.m)
    np.maximum.at(array.registers, slots, np.minimum(r, array.cap).astype(np.uint8))
    return array


def extract_virtual_sketch(array: PhysicalRegisterArray, flow, seeds: SeedTable) -> HllSketch:
    return HllSketch(seeds.s, array.h, array.registers[virtual_indices(flow, seeds, array.m)])


def _noise_correct(m: int, s: int, flow_estimate: float, array_estimate: float) -> float:
    return (m * s / (m - s)) * (flow_estimate / s - array_estimate / m)


def per_period_flow_cardinality(array: PhysicalRegisterArray, flow, seeds: SeedTable) -> float:
    """Single-period spread of ``flow`` with the shared-register noise removed."""
    s, m = seeds.s, array.m
    if m <= s:
        raise ValueError("array must be larger than the virtual sketch")
    n_s = estimate_registers(extract_virtual_sketch(array, flow, seeds).registers)
    n_u = estimate_registers(array.registers)
    return max(0.0, _noise_correct(m, s, n_s, n_u))


def _check_arrays(arrays: Sequence[PhysicalRegisterArray], seeds: SeedTable) -> None:
    if len(arrays) < 2:
        raise ValueError("need arrays from at least two periods")
    m, h = arrays[0].m, arrays[0].h
    for a in arrays[1:]:
        if (a.m, a.h) != (m, h):
            raise ValueError(f"array shape mismatch: (m={m}, h={h}) vs (m={a.m}, h={a.h})")
    if m <= seeds.s:
        raise ValueError(f"array size m={m} must exceed virtual size s={seeds.s}")


def array_persistent_estimate(arrays: Sequence[PhysicalRegisterArray], level: float = 0.95) -> PersistentEstimate:
    """Persistent elements of all flows together: the MLE over the whole arrays."""
    model = IntersectionModel(arrays[0].m, [estimate_registers(a.registers) for a in arrays], arrays[0].cap)
    joint = np.minimum.reduce([a.registers for a in arrays])
    est = mle_estimate(model, joint, level)
    est.extra["model"] = model
    return est


@dataclass
class VirtualEstimate(PersistentEstimate):
    n_s_hat: float = 0.0
    n_u_hat: float = 0.0
    clamped: bool = False
    flow_model: IntersectionModel | None = field(default=None, repr=False)


PERIOD_CARDINALITY_MODES = ("sketch", "corrected")


def vi_hll_estimate(
    arrays: Sequence[PhysicalRegisterArray],
    flow,
    seeds: SeedTable,
    *,
    background: PersistentEstimate | None = None,
    period_cardinality: str = "sketch",
    level: float = 0.95,
) -> VirtualEstimate:
    """Persistent spread of one flow from its virtual sketches in ``t`` arrays.

    ``background`` is the whole-array estimate from
    :func:`array_persistent_estimate`; it is independent of the flow and may
    be computed once per query batch. ``period_cardinality`` selects the
    per-period inputs of the flow-level likelihood: ``"sketch"`` uses the
    plain estimate of each virtual sketch (noise included, matching the noise
    present in the intersection), ``"corrected"`` uses
    :func:`per_period_flow_cardinality`.
    """
    _check_arrays(arrays, seeds)
    if period_cardinality not in PERIOD_CARDINALITY_MODES:
        raise ValueError(f"period_cardinality must be one of {PERIOD_CARDINALITY_MODES}")
    m, s = arrays[0].m, seeds.s
    idx = virtual_indices(flow, seeds, m)
    views = [a.registers[idx] for a in arrays]
    if period_cardinality == "sketch":
        n_hat = [estimate_registers(v) for v in views]
    else:
        n_hat = [per_period_flow_cardinality(a, flow, seeds) for a in arrays]
    flow_model = IntersectionModel(s, n_hat, arrays[0].cap)
    flow_est = mle_estimate(flow_model, np.minimum.reduce(views), level)

    if background is None:
        background = array_persistent_estimate(arrays, level)
    n_s, n_u = flow_est.n_star_hat, background.n_star_hat
    raw = _noise_correct(m, s, n_s, n_u)
    n_hat_star = max(0.0, raw)

    stderr = math.inf
    low, high = 0.0, math.inf
    if n_hat_star > 0 and n_s > 0 and n_u > 0 and "model" in background.extra:
        try:
            stderr = vi_hll_theoretical_stderr(
                m, s, n_hat_star, n_u,
                math.sqrt(psi_squared(flow_model, n_s)),
                math.sqrt(psi_squared(background.extra["model"], n_u)),
            )
        except ModelInvalidError:
            stderr = math.nan
        if math.isfinite(stderr):
            from scipy.stats import norm

            half = norm.ppf(0.5 + level / 2.0) * n_hat_star * stderr
            low, high = n_hat_star - half, n_hat_star + half
    return VirtualEstimate(
        n_star_hat=n_hat_star,
        stderr=stderr,
        ci_low=low,
        ci_high=high,
        iterations=flow_est.iterations,
        bracket=flow_est.bracket,
        boundary=flow_est.boundary,
        level=level,
        n_s_hat=n_s,
        n_u_hat=n_u,
        clamped=raw <= 0.0,
        flow_model=flow_model,
    )


def vi_hll_theoretical_stderr(m: int, s: int, n_star: float, n_u_star: float, psi_s: float, psi_m: float) -> float:
    """Predicted relative standard error of the noise-corrected estimate."""
    if m <= s:
        raise ValueError("m must exceed s")
    if n_star <= 0:
        raise ValueError("n* must be positive")
    noise = s * (n_u_star - n_star) / m
    rel_s = 1.0 / (s * psi_s**2)
    radicand = (
        rel_s * (n_star + noise) ** 2
        + (rel_s + 1.0) * noise * (1.0 - s / m)
        - (s / m) ** 2 * n_u_star**2 / (m * psi_m**2)
    )
    if radicand < 0:
        raise ModelInvalidError(f"negative variance {radicand:.3g} for m={m}, s={s}, n*={n_star}, n_u*={n_u_star}")
    return m / ((m - s) * n_star) * math.sqrt(radicand)
