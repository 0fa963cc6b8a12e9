"""Single-period HyperLogLog sketches.

A sketch of ``s = 2**b`` registers records one flow in one measurement
period. Each element hash is split into a ``b``-bit register index ``p``
(the leading bits) and a ``64 - b``-bit remainder ``q``; the register keeps
the maximum ``rho(q)`` seen, clamped to the register cap ``H = 2**h - 1``.

Registers are held one byte each in memory. The ``h``-bit budget is enforced
by clamping and honoured bit-exactly only by :mod:`perspread.store`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .hashing import ELEMENT_SEED, HASH_BITS, bit_length_array, element_key, hash64, hash64_array

DEFAULT_REGISTER_BITS = 5
MIN_REGISTERS = 16

_ALPHA_TABLE = {16: 0.673, 32: 0.697, 64: 0.709}


class HashSplit(NamedTuple):
    """Register index ``p`` and remainder ``q`` (``width`` bits) of one hash."""

    p: int
    q: int
    width: int


def rho(q: int, width: int) -> int:
    """Position of the leftmost 1-bit of the ``width``-bit string ``q``.

    An all-zero ``q`` yields ``width + 1``.
    """
    if width < 1:
        raise ValueError("q must have at least one bit")
    if q < 0 or q >> width:
        raise ValueError(f"q={q} does not fit in {width} bits")
    return width - q.bit_length() + 1


def rho_array(q: np.ndarray, width: int) -> np.ndarray:
    return width - bit_length_array(q) + 1


def split_hash(x: int, index_bits: int) -> HashSplit:
    width = HASH_BITS - index_bits
    return HashSplit(x >> width, x & ((1 << width) - 1), width)


def hash_element(element, index_bits: int, seed: int = ELEMENT_SEED) -> HashSplit:
    return split_hash(hash64(element_key(element), seed), index_bits)


def hash_keys(keys: np.ndarray, index_bits: int, seed: int = ELEMENT_SEED):
    """Vectorized element hashing: returns ``(p, rho)`` arrays for 64-bit keys."""
    x = hash64_array(keys, seed)
    width = HASH_BITS - index_bits
    p = (x >> np.uint64(width)).astype(np.int64)
    q = x & np.uint64((1 << width) - 1)
    return p, rho_array(q, width)


def alpha(s: int) -> float:
    """Bias-correction constant of the harmonic-mean estimator."""
    if s in _ALPHA_TABLE:
        return _ALPHA_TABLE[s]
    if s >= 128:
        return 0.7213 / (1.0 + 1.079 / s)
    raise ValueError(f"no bias-correction constant for {s} registers")


def estimate_registers(registers: np.ndarray) -> float:
    """Cardinality estimate for a raw register array of any supported size.

    Used directly on whole physical arrays, whose size need not be a power
    of two. Below ``2.5 * s`` the registers are read as a bitmap (linear
    counting); if no register is zero the raw estimate is kept.
    """
    registers = np.asarray(registers)
    s = registers.size
    raw = alpha(s) * s * s / float(np.sum(np.ldexp(1.0, -registers.astype(np.int64))))
    if raw < 2.5 * s:
        zeros = int(np.count_nonzero(registers == 0))
        if zeros:
            return -s * math.log(zeros / s)
    return raw


@dataclass(eq=False)
class HllSketch:
    """``s`` registers of ``h`` bits recording one flow in one period."""

    s: int = 512
    h: int = DEFAULT_REGISTER_BITS
    registers: np.ndarray | None = None

    def __post_init__(self):
        if self.s < MIN_REGISTERS or self.s & (self.s - 1):
            raise ValueError(f"register count must be a power of two >= {MIN_REGISTERS}, got {self.s}")
        if not 1 <= self.h <= 8:
            raise ValueError(f"register width must be 1..8 bits, got {self.h}")
        if self.registers is None:
            self.registers = np.zeros(self.s, dtype=np.uint8)
        else:
            regs = np.asarray(self.registers)
            if regs.shape != (self.s,):
                raise ValueError(f"expected {self.s} registers, got shape {regs.shape}")
            if regs.size and int(regs.max()) > self.cap:
                raise ValueError(f"register value exceeds cap {self.cap}")
            self.registers = regs.astype(np.uint8)

    @property
    def b(self) -> int:
        return self.s.bit_length() - 1

    @property
    def cap(self) -> int:
        return (1 << self.h) - 1

    def record(self, element) -> None:
        p, q, width = hash_element(element, self.b)
        value = min(rho(q, width), self.cap)
        if value > self.registers[p]:
            self.registers[p] = value

    def record_keys(self, keys: np.ndarray) -> None:
        """Record many integer element keys at once."""
        p, r = hash_keys(keys, self.b)
        np.maximum.at(self.registers, p, np.minimum(r, self.cap).astype(np.uint8))

    def update(self, elements: Iterable) -> None:
        for element in elements:
            self.record(element)

    def estimate(self) -> float:
        return estimate_cardinality(self)

    def copy(self) -> HllSketch:
        return HllSketch(self.s, self.h, self.registers.copy())

    def __eq__(self, other):
        if not isinstance(other, HllSketch):
            return NotImplemented
        return self.s == other.s and self.h == other.h and np.array_equal(self.registers, other.registers)

    def __repr__(self):
        return f"HllSketch(s={self.s}, h={self.h}, nonzero={int(np.count_nonzero(self.registers))})"


def record_element(sketch: HllSketch, element) -> HllSketch:
    sketch.record(element)
    return sketch


def estimate_cardinality(sketch: HllSketch) -> float:
    return estimate_registers(sketch.registers)


def _check_compatible(sketches: Sequence[HllSketch]) -> None:
    if not sketches:
        raise ValueError("need at least one sketch")
    s, h = sketches[0].s, sketches[0].h
    for other in sketches[1:]:
        if (other.s, other.h) != (s, h):
            raise ValueError(f"sketch shape mismatch: (s={s}, h={h}) vs (s={other.s}, h={other.h})")


def union(sketches: Sequence[HllSketch]) -> HllSketch:
    """Register-wise maximum: the sketch of the union of the recorded sets."""
    _check_compatible(sketches)
    regs = np.maximum.reduce([sk.registers for sk in sketches])
    return HllSketch(sketches[0].s, sketches[0].h, regs)


def intersect(sketches: Sequence[HllSketch]) -> HllSketch:
    """Register-wise minimum across periods."""
    _check_compatible(sketches)
    regs = np.minimum.reduce([sk.registers for sk in sketches])
    return HllSketch(sketches[0].s, sketches[0].h, regs)
