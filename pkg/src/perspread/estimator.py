"""Maximum-likelihood persistent-spread estimation from intersected HLL sketches.

The register-wise minimum ``M∩`` of a flow's per-period sketches retains
every register set by a persistent element, plus registers where transient
elements happened to reach the same height in *every* period. Modelling
both sources gives a closed-form CDF for an intersection register,

    G(n*, k) = exp(-n*/(s 2^k)) * (1 - prod_j (1 - exp(-(n_j - n*)/(s 2^k)))),

from which the register pmf, the log-likelihood of the register histogram
and its score follow. The per-period cardinalities ``n_j`` are plug-in
estimates and are held fixed while ``n*`` varies.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize, stats

from .hll import HllSketch, estimate_cardinality, estimate_registers, union

# Smallest n_j - n* at which the derivative is evaluated; it is singular at 0.
GAP_FLOOR = 1e-6
UNION_BASELINE_MAX_PERIODS = 6


@dataclass(frozen=True)
class IntersectionModel:
    """Statistical context of one t-way intersection sketch.

    ``s`` may be any register count (whole physical arrays are modelled
    with ``s = m``). ``n_hat`` holds the per-period cardinality estimates.
    """

    s: int
    n_hat: tuple
    H: int = 31

    def __post_init__(self):
        n_hat = tuple(float(v) for v in self.n_hat)
        object.__setattr__(self, "n_hat", n_hat)
        if not n_hat:
            raise ValueError("need at least one period")
        if any(v < 0 or not math.isfinite(v) for v in n_hat):
            raise ValueError("per-period cardinalities must be finite and non-negative")
        if self.H < 1:
            raise ValueError("register cap must be at least 1")
        if self.s < 1:
            raise ValueError("register count must be positive")

    @property
    def t(self) -> int:
        return len(self.n_hat)

    @property
    def n_min(self) -> float:
        return min(self.n_hat)

    @classmethod
    def from_sketches(cls, sketches: Sequence[HllSketch]) -> IntersectionModel:
        s, h = sketches[0].s, sketches[0].h
        return cls(s=s, n_hat=[estimate_cardinality(sk) for sk in sketches], H=(1 << h) - 1)


@dataclass
class PersistentEstimate:
    n_star_hat: float
    stderr: float
    ci_low: float
    ci_high: float
    iterations: int = 0
    bracket: tuple = (0.0, 0.0)
    boundary: bool = False
    level: float = 0.95
    extra: dict = field(default_factory=dict)


def histogram(registers, H: int) -> np.ndarray:
    """Counts ``N_0..N_H`` of registers carrying each value."""
    if isinstance(registers, HllSketch):
        registers = registers.registers
    registers = np.asarray(registers)
    if registers.size and int(registers.max()) > H:
        raise ValueError(f"register value exceeds cap {H}")
    return np.bincount(registers.astype(np.int64), minlength=H + 1)


def _log_one_minus_exp_neg(b: np.ndarray) -> np.ndarray:
    """``log(1 - exp(-b))`` for ``b > 0``, accurate at both ends."""
    small = b < math.log(2.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(small, np.log(-np.expm1(-np.where(small, b, 1.0))), np.log1p(-np.exp(-b)))


def _terms(model: IntersectionModel, n_star: float, k):
    """Shared pieces: scale ``s 2^k``, ``exp(-n*/c)``, transient product and its complement."""
    k = np.asarray(k, dtype=np.float64)
    c = model.s * np.exp2(k)
    gaps = np.maximum(np.asarray(model.n_hat) - n_star, 0.0)
    b = gaps[:, None] / np.atleast_1d(c)[None, :]
    with np.errstate(divide="ignore"):
        log_p = _log_one_minus_exp_neg(b).sum(axis=0)
    prod = np.exp(log_p)
    comp = -np.expm1(log_p)
    shape = k.shape
    return c, np.exp(-n_star / c), prod.reshape(shape), comp.reshape(shape), b


def generation_function(model: IntersectionModel, n_star: float, k):
    """CDF ``P(M∩[i] <= k)`` of an intersection register. ``k`` may be an array."""
    _, e, _, comp, _ = _terms(model, n_star, k)
    out = e * comp
    return float(out) if np.ndim(out) == 0 else out


def _generation_complement(model: IntersectionModel, n_star: float, k):
    c, e, prod, _, _ = _terms(model, n_star, k)
    return -np.expm1(-n_star / c) + e * prod


def generation_function_derivative(model: IntersectionModel, n_star: float, k):
    """Partial derivative of :func:`generation_function` in ``n*`` with ``n_j`` fixed."""
    if np.any(np.asarray(model.n_hat) - n_star < GAP_FLOOR):
        raise ValueError("n* reaches a per-period cardinality; the derivative is singular there")
    c, e, prod, comp, b = _terms(model, n_star, k)
    with np.errstate(over="ignore"):
        inv = (1.0 / np.expm1(b)).sum(axis=0).reshape(np.shape(prod))
    # (1 + sum) * prod - 1, rearranged to avoid cancellation when prod ~ 1
    out = e / c * (inv * prod - comp)
    return float(out) if np.ndim(out) == 0 else out


def register_pmf(model: IntersectionModel, n_star: float) -> np.ndarray:
    """Probabilities of an intersection register carrying ``0..H``."""
    H = model.H
    ks = np.arange(H)
    g = np.atleast_1d(generation_function(model, n_star, ks))
    gc = np.atleast_1d(_generation_complement(model, n_star, ks))
    pmf = np.empty(H + 1)
    pmf[0] = g[0]
    if H > 1:
        direct = g[1:] - g[:-1]
        via_comp = gc[:-1] - gc[1:]
        pmf[1:H] = np.where(g[1:] < 0.5, direct, via_comp)
    pmf[H] = gc[H - 1]
    return np.clip(pmf, 0.0, 1.0)


def register_pmf_derivative(model: IntersectionModel, n_star: float) -> np.ndarray:
    H = model.H
    dg = np.atleast_1d(generation_function_derivative(model, n_star, np.arange(H)))
    dpmf = np.empty(H + 1)
    dpmf[0] = dg[0]
    dpmf[1:H] = dg[1:] - dg[:-1]
    dpmf[H] = -dg[H - 1]
    return dpmf


def log_likelihood(model: IntersectionModel, hist: np.ndarray, n_star: float) -> float:
    """``sum_k N_k ln pmf[k]``, without the multinomial constant."""
    hist = np.asarray(hist)
    pmf = register_pmf(model, n_star)
    used = hist > 0
    if np.any(pmf[used] <= 0.0):
        return -math.inf
    return float(np.dot(hist[used], np.log(pmf[used])))


def score(model: IntersectionModel, hist: np.ndarray, n_star: float) -> float:
    """Derivative of :func:`log_likelihood` in ``n*``."""
    hist = np.asarray(hist)
    pmf = register_pmf(model, n_star)
    used = hist > 0
    if np.any(pmf[used] <= 0.0):
        return math.nan
    dpmf = register_pmf_derivative(model, n_star)
    return float(np.dot(hist[used], dpmf[used] / pmf[used]))


# -- accuracy -------------------------------------------------------------------

# Exponent e in psi^2 = (n* sigma)^2 / s^e. Calibrated by Monte-Carlo against the
# empirical spread of mle_estimate; see tests/test_acceptance.py.
PSI_SCALE_EXPONENT = 0


def _fisher_terms(model: IntersectionModel, n_star: float) -> float:
    """``s^2 sigma^2``: the three-term sum shared by sigma^2 and psi^2.

    Uses the simplified derivative ``dG/dn* = -G/(s 2^k)`` that treats the
    transient counts ``n_j - n*`` as independent of ``n*``.
    """
    H = model.H
    g = np.atleast_1d(generation_function(model, n_star, np.arange(H)))
    total = g[0]
    tail = 1.0 - g[H - 1]
    if tail > 0.0:
        total += g[H - 1] ** 2 / (4.0 ** (H - 1) * tail)
    for k in range(1, H):
        p = g[k] - g[k - 1]
        if p > 0.0:
            total += (g[k] - 2.0 * g[k - 1]) ** 2 / (4.0**k * p)
    return float(total)


def sigma_squared(model: IntersectionModel, n_star: float) -> float:
    """Variance of the per-register score, from the simplified derivative."""
    return _fisher_terms(model, n_star) / model.s**2


def psi_squared(model: IntersectionModel, n_star: float) -> float:
    """Accuracy factor with relative standard error ``1 / (sqrt(s) psi)``."""
    if n_star <= 0:
        raise ValueError("psi is defined for n* > 0")
    return (n_star**2) * sigma_squared(model, n_star) / float(model.s) ** PSI_SCALE_EXPONENT


def psi_squared_closed_form(model: IntersectionModel, n_star: float) -> float:
    """The closed form with its ``(n*)^2 / s^3`` prefactor, kept for comparison."""
    return (n_star**2) * _fisher_terms(model, n_star) / float(model.s) ** 3


def relative_stderr(model: IntersectionModel, n_star: float) -> float:
    if n_star <= 0:
        return math.inf
    return 1.0 / math.sqrt(model.s * psi_squared(model, n_star))


def exact_fisher_information(model: IntersectionModel, n_star: float) -> float:
    """Per-register Fisher information using the full derivative (``n_j`` fixed)."""
    pmf = register_pmf(model, n_star)
    dpmf = register_pmf_derivative(model, n_star)
    ok = pmf > 0
    return float(np.sum(dpmf[ok] ** 2 / pmf[ok]))


def confidence_interval(n_star_hat: float, model: IntersectionModel, level: float = 0.95):
    """Symmetric normal interval around the plug-in estimate."""
    if not 0.0 <= level < 1.0:
        raise ValueError("level must lie in [0, 1)")
    z = stats.norm.ppf(0.5 + level / 2.0)
    if z == 0.0:
        return n_star_hat, n_star_hat
    half = z * n_star_hat * relative_stderr(model, n_star_hat)
    return n_star_hat - half, n_star_hat + half


# -- solver ---------------------------------------------------------------------

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
_GRID_POINTS = 41


def _golden_max(f, lo, hi, tol):
    a, b = lo, hi
    x1 = b - _GOLDEN * (b - a)
    x2 = a + _GOLDEN * (b - a)
    f1, f2 = f(x1), f(x2)
    iterations = 0
    while b - a > tol:
        iterations += 1
        if f1 >= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - _GOLDEN * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + _GOLDEN * (b - a)
            f2 = f(x2)
    return (x1, f1, iterations) if f1 >= f2 else (x2, f2, iterations)


def maximize_likelihood(model: IntersectionModel, hist: np.ndarray):
    """Return ``(n_hat, iterations, bracket, boundary)`` maximizing the log-likelihood.

    A coarse grid localizes the peak, golden-section search narrows it, and
    a root of the score inside the bracket (if it changes sign) polishes it.
    """
    hi = model.n_min - 1.0
    if hi <= 0.0:
        return 0.0, 0, (0.0, max(hi, 0.0)), True

    def f(x):
        return log_likelihood(model, hist, x)

    grid = np.linspace(0.0, hi, _GRID_POINTS)
    values = np.array([f(x) for x in grid])
    best = int(np.argmax(values))
    lo_b, hi_b = grid[max(best - 1, 0)], grid[min(best + 1, _GRID_POINTS - 1)]
    tol = max(0.5, 1e-4 * grid[best])
    x, fx, iterations = _golden_max(f, lo_b, hi_b, tol)
    iterations += _GRID_POINTS

    g_lo, g_hi = score(model, hist, lo_b), score(model, hist, hi_b)
    if lo_b < hi_b and np.isfinite(g_lo) and np.isfinite(g_hi) and g_lo > 0.0 > g_hi:
        root, info = optimize.brentq(
            lambda v: score(model, hist, v), lo_b, hi_b, xtol=tol, full_output=True
        )
        iterations += info.iterations
        if f(root) >= fx - 1e-9 * abs(fx):
            x = root
    x = min(max(x, 0.0), hi)
    boundary = x <= tol or x >= hi - tol
    return float(x), iterations, (float(lo_b), float(hi_b)), bool(boundary)


def mle_estimate(model: IntersectionModel, intersection, level: float = 0.95) -> PersistentEstimate:
    """Persistent-spread estimate from an intersection sketch (or raw registers)."""
    hist = histogram(intersection, model.H)
    if hist.sum() != model.s:
        raise ValueError(f"intersection has {hist.sum()} registers, model expects {model.s}")
    if model.n_min <= 0.0:
        return PersistentEstimate(0.0, math.inf, 0.0, math.inf, 0, (0.0, 0.0), True, level)
    n_hat, iterations, bracket, boundary = maximize_likelihood(model, hist)
    stderr = relative_stderr(model, n_hat)
    if n_hat > 0.0:
        low, high = confidence_interval(n_hat, model, level)
    else:
        low, high = 0.0, math.inf
    return PersistentEstimate(n_hat, stderr, low, high, iterations, bracket, boundary, level)


def ihll_estimate(sketches: Sequence[HllSketch], level: float = 0.95) -> PersistentEstimate:
    """Estimate from a flow's dedicated per-period sketches."""
    from .hll import intersect

    model = IntersectionModel.from_sketches(sketches)
    return mle_estimate(model, intersect(sketches), level)


# -- register-union baseline ----------------------------------------------------------


def union_baseline_estimate(sketches: Sequence[HllSketch], per_period_estimates=None) -> float:
    """Inclusion-exclusion over union sketches of every non-empty period subset."""
    t = len(sketches)
    if t < 2:
        raise ValueError("need at least two periods")
    if t > UNION_BASELINE_MAX_PERIODS:
        raise ValueError(f"union baseline costs 2^t unions; t={t} exceeds {UNION_BASELINE_MAX_PERIODS}")
    if per_period_estimates is None:
        per_period_estimates = [estimate_cardinality(sk) for sk in sketches]
    total = 0.0
    for size in range(1, t + 1):
        sign = 1.0 if size % 2 else -1.0
        for subset in itertools.combinations(range(t), size):
            if size == 1:
                est = per_period_estimates[subset[0]]
            else:
                est = estimate_registers(union([sketches[j] for j in subset]).registers)
            total += sign * est
    return total
