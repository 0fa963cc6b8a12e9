import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perspread.estimator import (
    IntersectionModel,
    confidence_interval,
    generation_function,
    generation_function_derivative,
    histogram,
    ihll_estimate,
    log_likelihood,
    mle_estimate,
    psi_squared,
    psi_squared_closed_form,
    register_pmf,
    register_pmf_derivative,
    relative_stderr,
    score,
    sigma_squared,
    union_baseline_estimate,
)
from perspread.experiments import dedicated_sketches, ihll_trials
from perspread.hll import HllSketch, intersect

G_EXAMPLE = IntersectionModel(512, (2000, 2000))


# -- histogram ---------------------------------------------------------------------------


def test_histogram_examples():
    assert histogram(np.zeros(512, np.uint8), 31)[0] == 512
    h = histogram(np.array([1, 1, 3, 0]), 31)
    assert (h[0], h[1], h[2], h[3]) == (1, 2, 0, 1)
    assert len(h) == 32


@given(st.lists(st.integers(0, 31), min_size=1, max_size=600))
def test_histogram_sums_to_register_count(regs):
    assert histogram(np.array(regs), 31).sum() == len(regs)


# -- generation function and pmf ----------------------------------------------------


def test_generation_function_example():
    c = 512 * 2**3
    hand = math.exp(-1000 / c) * (1 - (1 - math.exp(-1000 / c)) ** 2)
    assert generation_function(G_EXAMPLE, 1000, 3) == pytest.approx(hand, rel=1e-14)
    assert generation_function(G_EXAMPLE, 1000, 3) == pytest.approx(0.74662, abs=5e-6)


def test_generation_function_against_simulated_registers():
    # P(M∩[i] <= 3) for 1000 shared elements plus 1000 fresh ones per period
    rng = np.random.default_rng(31)
    fractions = []
    for _ in range(60):
        sketches, _ = dedicated_sketches(rng, 512, 2, 1000, 1.0)
        fractions.append(np.mean(intersect(sketches).registers <= 3))
    assert np.mean(fractions) == pytest.approx(0.74662, abs=3 * np.std(fractions) / math.sqrt(60) + 1e-3)


def test_generation_function_limits():
    model = IntersectionModel(512, (3000, 4000, 5000))
    assert generation_function(model, 1500, 60) == pytest.approx(1.0, abs=1e-12)
    flat = IntersectionModel(512, (1500, 1500))
    for k in (0, 2, 7):
        assert generation_function(flat, 1500, k) == pytest.approx(math.exp(-1500 / (512 * 2**k)), rel=1e-9)


def test_generation_function_vectorized_in_k():
    ks = np.arange(31)
    vec = generation_function(G_EXAMPLE, 800, ks)
    assert np.allclose(vec, [generation_function(G_EXAMPLE, 800, int(k)) for k in ks], rtol=0, atol=1e-15)
    assert np.all(np.diff(vec) >= 0)


def valid_models():
    return st.builds(
        lambda s_exp, t, base, extras, frac: (
            IntersectionModel(2**s_exp, tuple(base * (1 + e) for e in extras[:t])),
            frac * base,
        ),
        st.integers(4, 12),
        st.integers(1, 10),
        st.floats(1.0, 1e7),
        st.lists(st.floats(0.0, 20.0), min_size=10, max_size=10),
        st.floats(0.0, 1.0),
    )


@settings(max_examples=200, deadline=None)
@given(valid_models())
def test_pmf_sums_to_one(case):
    model, n_star = case
    pmf = register_pmf(model, n_star)
    assert abs(pmf.sum() - 1.0) < 1e-12
    assert np.all(pmf >= 0)


def test_pmf_degenerate_all_zero():
    pmf = register_pmf(IntersectionModel(512, (0, 0)), 0.0)
    assert pmf[0] == 1.0 and pmf[1:].sum() == 0.0


def test_pmf_matches_differences_of_generation_function():
    pmf = register_pmf(G_EXAMPLE, 1000)
    g = [generation_function(G_EXAMPLE, 1000, k) for k in range(31)]
    assert pmf[0] == pytest.approx(g[0], rel=1e-12)
    for k in range(1, 31):
        assert pmf[k] == pytest.approx(g[k] - g[k - 1], abs=1e-15)
    assert pmf[31] == pytest.approx(1 - g[30], abs=1e-15)


# -- derivatives ----------------------------------------------------------------------


def derivative_grid():
    for s, t, k, frac, snr in itertools.product((128, 512, 2048), (2, 5, 10), (0, 2, 5, 9), (0.05, 0.3, 0.9), (0.5, 1.0)):
        c = s * 2**k
        n_star = frac * c
        n_hat = [n_star * (1 + (1 + 0.1 * j) / snr) for j in range(t)]
        yield IntersectionModel(s, n_hat), n_star, k


def test_derivative_matches_finite_difference():
    cases = list(derivative_grid())
    assert len(cases) >= 200
    for model, n_star, k in cases:
        d = 1e-3 * n_star
        fd = (generation_function(model, n_star + d, k) - generation_function(model, n_star - d, k)) / (2 * d)
        assert generation_function_derivative(model, n_star, k) == pytest.approx(fd, rel=1e-6), (model, n_star, k)


def test_derivative_single_period_formula():
    s, k, n1, n_star = 512, 2, 9000.0, 2500.0
    c = s * 2**k
    gap = (n1 - n_star) / c
    closed = (1 / c) * math.exp(-n_star / c) * ((1 + 1 / math.expm1(gap)) * (1 - math.exp(-gap)) - 1)
    model = IntersectionModel(s, (n1,))
    assert generation_function_derivative(model, n_star, k) == pytest.approx(closed, rel=1e-12)
    d = 1e-3 * n_star
    fd = (generation_function(model, n_star + d, k) - generation_function(model, n_star - d, k)) / (2 * d)
    assert closed == pytest.approx(fd, rel=1e-6)


def test_derivative_vanishes_for_large_k():
    # decays like 1/(s 2^k)
    model = IntersectionModel(512, (20000, 20000))
    values = [abs(generation_function_derivative(model, 10000, k)) for k in (20, 30, 40)]
    assert values[0] > values[1] > values[2]
    assert values[2] <= 1.0 / (512 * 2.0**40)


def test_derivative_singular_at_period_cardinality():
    with pytest.raises(ValueError):
        generation_function_derivative(IntersectionModel(512, (1000, 2000)), 1000, 3)


def simulated_hist(seed, s=512, t=10, n_star=10_000, snr=1.0):
    sketches, truth = dedicated_sketches(np.random.default_rng(seed), s, t, n_star, snr)
    model = IntersectionModel.from_sketches(sketches)
    return model, histogram(intersect(sketches), 31), truth


def test_score_matches_finite_difference_of_likelihood():
    for seed in range(5):
        model, hist, truth = simulated_hist(seed)
        for x in (0.5 * truth, truth, 1.3 * truth):
            d = 1e-4 * x
            fd = (log_likelihood(model, hist, x + d) - log_likelihood(model, hist, x - d)) / (2 * d)
            assert score(model, hist, x) == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_score_vanishes_on_idealized_histogram():
    model = IntersectionModel(512, (20000,) * 10)
    pmf = register_pmf(model, 10_000)
    assert abs(score(model, 512 * pmf, 10_000)) < 1e-9
    assert abs(register_pmf_derivative(model, 10_000).sum()) < 1e-15


def test_expected_score_is_zero_at_truth():
    # per-register score at the exact plug-in model; mean must be near 0
    rng = np.random.default_rng(77)
    model = IntersectionModel(512, (20000,) * 10)
    pmf = register_pmf(model, 10_000)
    values = [score(model, rng.multinomial(512, pmf), 10_000) / 512 for _ in range(400)]
    assert abs(np.mean(values)) < 3 * np.std(values) / math.sqrt(len(values))


# -- likelihood -----------------------------------------------------------------------


def test_log_likelihood_examples():
    degenerate = IntersectionModel(512, (0, 0))
    hist = np.zeros(32, np.int64)
    hist[0] = 512
    assert log_likelihood(degenerate, hist, 0.0) == 0.0
    model, h, truth = simulated_hist(1)
    for x in np.linspace(0, model.n_min - 1, 7):
        assert log_likelihood(model, h, x) <= 0.0


def test_true_value_beats_double():
    diffs = []
    for seed in range(20):
        model, hist, truth = simulated_hist(100 + seed, n_star=5000, snr=0.25)
        diffs.append(log_likelihood(model, hist, truth) - log_likelihood(model, hist, 2 * truth))
    assert np.mean(diffs) > 0


# -- estimator ------------------------------------------------------------------------


def test_degenerate_estimate():
    est = mle_estimate(IntersectionModel(512, (0.0, 0.0)), HllSketch(512))
    assert est.n_star_hat == 0.0
    assert est.boundary


def test_estimate_depends_only_on_histogram():
    model, _, _ = simulated_hist(5)
    sketches, _ = dedicated_sketches(np.random.default_rng(5), 512, 10, 10_000, 1.0)
    cap = intersect(sketches).registers
    shuffled = np.random.default_rng(0).permutation(cap)
    assert mle_estimate(model, cap).n_star_hat == mle_estimate(model, shuffled).n_star_hat


def test_estimate_symmetric_in_periods():
    sketches, _ = dedicated_sketches(np.random.default_rng(8), 512, 4, 3000, 0.5)
    model = IntersectionModel.from_sketches(sketches)
    cap = intersect(sketches)
    flipped = IntersectionModel(512, model.n_hat[::-1])
    assert mle_estimate(model, cap).n_star_hat == pytest.approx(mle_estimate(flipped, cap).n_star_hat, rel=1e-9)


def test_estimate_unbiased_over_trials():
    res = ihll_trials(512, 10, 10_000, 1.0, trials=100, seed=17)
    ratios = res.estimate / res.truth
    assert abs(ratios.mean() - 1) < 0.02
    assert 0.5 * res.predicted_stderr <= ratios.std(ddof=1) <= 2.0 * res.predicted_stderr


def test_ihll_estimate_wrapper():
    sketches, truth = dedicated_sketches(np.random.default_rng(4), 512, 3, 4000, 2.0)
    est = ihll_estimate(sketches)
    assert est.ci_low < est.n_star_hat < est.ci_high
    assert abs(est.n_star_hat / truth - 1) < 0.3


def test_estimate_rejects_wrong_register_count():
    with pytest.raises(ValueError):
        mle_estimate(IntersectionModel(512, (10.0, 10.0)), np.zeros(256, np.uint8))


# -- accuracy model -------------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(valid_models())
def test_psi_positive(case):
    model, n_star = case
    if 1e-9 * model.n_min < n_star < model.n_min:
        assert psi_squared(model, n_star) > 0


def test_psi_relations():
    model = IntersectionModel(512, (20000,) * 10)
    n = 10_000.0
    sigma2 = sigma_squared(model, n)
    assert psi_squared(model, n) == pytest.approx((n * math.sqrt(sigma2)) ** 2, rel=1e-12)
    assert psi_squared_closed_form(model, n) == pytest.approx((n * math.sqrt(sigma2)) ** 2 / 512, rel=1e-12)


@pytest.mark.parametrize("s", [128, 512])
def test_prediction_tracks_empirical_stderr(s):
    res = ihll_trials(s, 10, 10_000, 1.0, trials=100, seed=s)
    emp = np.std(res.estimate / res.truth, ddof=1)
    assert 0.5 <= emp / res.predicted_stderr <= 2.0


def test_interval_degenerates_at_zero_level():
    model = IntersectionModel(512, (20000,) * 10)
    assert confidence_interval(9000.0, model, 0.0) == (9000.0, 9000.0)


def test_interval_width_scales_with_root_s():
    widths = {}
    for s in (128, 512):
        res = ihll_trials(s, 10, 10_000, 1.0, trials=40, seed=3 + s)
        widths[s] = np.mean(res.ci_high - res.ci_low)
    assert widths[128] / widths[512] == pytest.approx(2.0, rel=0.2)


def test_relative_stderr_infinite_at_zero():
    assert relative_stderr(IntersectionModel(512, (10.0, 10.0)), 0.0) == math.inf


# -- union baseline --------------------------------------------------------------------


def test_union_baseline_identical_sets():
    keys = np.random.default_rng(2).integers(0, 2**64, 5000, dtype=np.uint64)
    a, b = HllSketch(512), HllSketch(512)
    a.record_keys(keys)
    b.record_keys(keys)
    assert union_baseline_estimate([a, b]) == pytest.approx(a.estimate(), rel=1e-12)


def test_union_baseline_disjoint_sets():
    rng = np.random.default_rng(3)
    values = []
    for _ in range(50):
        a, b = HllSketch(512), HllSketch(512)
        a.record_keys(rng.integers(0, 2**64, 5000, dtype=np.uint64))
        b.record_keys(rng.integers(0, 2**64, 5000, dtype=np.uint64))
        values.append(union_baseline_estimate([a, b]))
    assert abs(np.mean(values)) < 3 * np.std(values) / math.sqrt(len(values))


def test_union_baseline_limits():
    with pytest.raises(ValueError):
        union_baseline_estimate([HllSketch(16)])
    with pytest.raises(ValueError):
        union_baseline_estimate([HllSketch(16)] * 7)
