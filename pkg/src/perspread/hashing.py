"""Deterministic, seedable 64-bit hashing shared by every sketch in the package.

All hashing goes through two steps: an arbitrary element (int, bytes or str)
is first reduced to a 64-bit *key*, and the key is then mixed with a seed by
a splitmix64-style finalizer. The finalizer is a bijection on 64-bit words,
so distinct keys never collide under a fixed seed.

The scalar functions operate on Python ints; the ``*_array`` variants accept
``numpy.uint64`` arrays and produce bit-identical results.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1
HASH_BITS = 64

_GOLDEN = 0x9E3779B97F4A7C15
_MUL1 = 0xBF58476D1CE4E5B9
_MUL2 = 0x94D049BB133111EB

ELEMENT_SEED = 0x5EED_E1E3_0000_0001
FLOW_SEED = 0x5EED_F10E_0000_0002
INDEX_SEED = 0x5EED_1DE8_0000_0003


def element_key(element) -> int:
    """Reduce an element or flow label to a 64-bit key.

    Non-negative ints below 2**64 are used as-is, so integer element ids are
    cheap to hash in bulk. Strings are UTF-8 encoded; bytes are digested with
    8-byte BLAKE2b.
    """
    if isinstance(element, (int, np.integer)) and not isinstance(element, bool):
        value = int(element)
        if not 0 <= value <= MASK64:
            raise ValueError(f"integer element {value} outside the 64-bit key range")
        return value
    if isinstance(element, str):
        element = element.encode("utf-8")
    if isinstance(element, (bytes, bytearray, memoryview)):
        digest = hashlib.blake2b(bytes(element), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"cannot hash element of type {type(element).__name__}")


def _seed_offset(seed: int) -> int:
    return (seed * _GOLDEN + _GOLDEN) & MASK64


def hash64(key: int, seed: int = ELEMENT_SEED) -> int:
    z = (key ^ _seed_offset(seed)) & MASK64
    z = ((z ^ (z >> 30)) * _MUL1) & MASK64
    z = ((z ^ (z >> 27)) * _MUL2) & MASK64
    return z ^ (z >> 31)


def hash64_array(keys: np.ndarray, seed: int = ELEMENT_SEED) -> np.ndarray:
    z = np.asarray(keys, dtype=np.uint64) ^ np.uint64(_seed_offset(seed))
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MUL1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MUL2)
    return z ^ (z >> np.uint64(31))


def bit_length_array(values: np.ndarray) -> np.ndarray:
    """Vectorized ``int.bit_length`` for uint64 arrays.

    Splits each word into 32-bit halves so the float conversion inside
    ``frexp`` is exact.
    """
    values = np.asarray(values, dtype=np.uint64)
    hi = (values >> np.uint64(32)).astype(np.float64)
    lo = (values & np.uint64(0xFFFFFFFF)).astype(np.float64)
    _, hi_exp = np.frexp(hi)
    _, lo_exp = np.frexp(lo)
    return np.where(hi > 0, hi_exp + 32, lo_exp).astype(np.int64)
