import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perspread import hll
from perspread.hashing import hash64, hash64_array, element_key
from perspread.hll import HllSketch, alpha, estimate_cardinality, intersect, rho, union


def regs16(*head):
    r = np.zeros(16, dtype=np.uint8)
    r[: len(head)] = head
    return HllSketch(16, 5, r)


def find_element(b, p_want, rho_want):
    for e in range(10**6):
        p, q, width = hll.hash_element(e, b)
        if p == p_want and rho(q, width) == rho_want:
            return e
    raise AssertionError("no such element in search range")


# -- rho ---------------------------------------------------------------------------


def test_rho_examples():
    assert rho(0b0001 << 55, 59) == 4
    assert rho(1 << 58, 59) == 1
    assert rho((1 << 58) | 12345, 59) == 1
    assert rho(0, 59) == 60


def test_rho_rejects_oversized_q():
    with pytest.raises(ValueError):
        rho(1 << 59, 59)


@given(st.integers(0, (1 << 55) - 1))
def test_rho_array_matches_scalar(q):
    arr = hll.rho_array(np.array([q], dtype=np.uint64), 55)
    assert int(arr[0]) == rho(q, 55)


@given(st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1))
def test_hash_array_matches_scalar(key, seed):
    assert int(hash64_array(np.array([key], dtype=np.uint64), seed)[0]) == hash64(key, seed)


def test_hash_is_deterministic_for_byte_strings():
    a = hll.hash_element(b"198.51.100.7", 9)
    b = hll.hash_element(b"198.51.100.7", 9)
    assert a == b
    assert element_key("x") == element_key(b"x")


# -- recording ------------------------------------------------------------------------


def test_record_twice_is_idempotent():
    once, twice = HllSketch(), HllSketch()
    once.record(b"abc")
    twice.record(b"abc")
    twice.record(b"abc")
    assert once == twice


def test_record_sets_one_register():
    e = find_element(9, 7, 4)
    sk = hll.record_element(HllSketch(512), e)
    assert sk.registers[7] == 4
    assert np.count_nonzero(sk.registers) == 1


def test_register_clamps_at_cap(monkeypatch):
    monkeypatch.setattr(hll, "hash_element", lambda element, b: hll.HashSplit(3, 0, 64 - b))
    sk = HllSketch(512, 5)
    for e in range(1000):
        sk.record(e)
    assert sk.registers[3] == 31


def test_record_keys_matches_record():
    keys = np.random.default_rng(0).integers(0, 2**64, 5000, dtype=np.uint64)
    a, b = HllSketch(256), HllSketch(256)
    a.record_keys(keys)
    b.update(keys.tolist())
    assert a == b


def test_small_h_caps_vectorized_path():
    keys = np.arange(200_000, dtype=np.uint64)
    sk = HllSketch(16, 3)
    sk.record_keys(keys)
    assert sk.registers.max() == 7


# -- estimation -----------------------------------------------------------------------


def test_empty_sketch_estimates_zero():
    assert estimate_cardinality(HllSketch(512)) == 0.0


@pytest.mark.parametrize("s,expected", [(16, 0.673), (32, 0.697), (64, 0.709), (128, 0.7213 / (1 + 1.079 / 128))])
def test_alpha(s, expected):
    assert alpha(s) == pytest.approx(expected, abs=1e-12)


def test_alpha_128_value():
    assert alpha(128) == pytest.approx(0.71527, abs=5e-6)


def test_alpha_rejects_unsupported():
    with pytest.raises(ValueError):
        alpha(100)


def test_estimate_within_three_sigma_over_trials():
    rng = np.random.default_rng(2024)
    bound = 3 * 1.04 / math.sqrt(512)
    hits = 0
    for _ in range(200):
        keys = np.unique(rng.integers(0, 2**64, 10_000, dtype=np.uint64))
        sk = HllSketch(512)
        sk.record_keys(keys)
        hits += abs(sk.estimate() / len(keys) - 1) <= bound
    assert hits >= 190


def test_linear_counting_range():
    # below 2.5 s the bitmap rule takes over
    rng = np.random.default_rng(5)
    errs = []
    for _ in range(100):
        sk = HllSketch(512)
        sk.record_keys(rng.integers(0, 2**64, 300, dtype=np.uint64))
        errs.append(sk.estimate() / 300 - 1)
    assert abs(np.mean(errs)) < 0.02


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 2**64 - 1), max_size=300), st.lists(st.integers(0, 2**64 - 1), max_size=300))
def test_estimate_is_monotone(first, more):
    sk = HllSketch(64)
    sk.update(first)
    before = sk.estimate()
    sk.update(more)
    assert sk.estimate() >= before


# -- union and intersection ---------------------------------------------------------


def test_union_examples():
    assert union([regs16(3, 0, 5), regs16(1, 2, 5)]) == regs16(3, 2, 5)
    m = regs16(4, 1, 9)
    assert union([m, m]) == m


def test_intersect_examples():
    assert intersect([regs16(3, 0, 5), regs16(1, 2, 5)]) == regs16(1, 0, 5)
    m = regs16(4, 1, 9)
    assert intersect([m, m]) == m


def test_mismatched_shapes_rejected():
    with pytest.raises(ValueError):
        union([HllSketch(16), HllSketch(32)])
    with pytest.raises(ValueError):
        intersect([HllSketch(16, 5), HllSketch(16, 6)])


@settings(max_examples=40, deadline=None)
@given(st.sets(st.integers(0, 2**64 - 1), max_size=200), st.sets(st.integers(0, 2**64 - 1), max_size=200))
def test_merge_equivalence(s1, s2):
    a, b, both = HllSketch(32), HllSketch(32), HllSketch(32)
    a.update(s1)
    b.update(s2)
    both.update(s1 | s2)
    assert union([a, b]) == both


def test_intersection_embeds_persistent_sketch():
    rng = np.random.default_rng(11)
    persistent = rng.integers(0, 2**64, 3000, dtype=np.uint64)
    m_star = HllSketch(512)
    m_star.record_keys(persistent)
    periods, transients = [], []
    for _ in range(4):
        tr = HllSketch(512)
        tr.record_keys(rng.integers(0, 2**64, 3000, dtype=np.uint64))
        transients.append(tr)
        periods.append(union([m_star, tr]))
    cap = intersect(periods)
    assert np.all(cap.registers >= m_star.registers)
    assert cap == union([m_star, intersect(transients)])


def test_stderr_scales_with_s():
    rng = np.random.default_rng(9)
    for s in (128, 512):
        ratios = []
        for _ in range(200):
            sk = HllSketch(s)
            sk.record_keys(rng.integers(0, 2**64, 50 * s, dtype=np.uint64))
            ratios.append(sk.estimate() / (50 * s))
        ref = 1.04 / math.sqrt(s)
        assert 0.5 * ref <= np.std(ratios, ddof=1) <= 2.0 * ref
