"""Persistent spread estimation over multiple measurement periods.

``hll`` holds the base sketch, ``estimator`` the likelihood-based
intersection estimator, ``virtual`` the shared-array variant, ``sim`` the
trace generator and ``store`` the snapshot format.
"""

from .estimator import (
    IntersectionModel,
    PersistentEstimate,
    confidence_interval,
    generation_function,
    generation_function_derivative,
    ihll_estimate,
    log_likelihood,
    mle_estimate,
    psi_squared,
    register_pmf,
    score,
    union_baseline_estimate,
)
from .hll import HllSketch, estimate_cardinality, intersect, record_element, union
from .sim import GroundTruth, PowerLaw, TraceSpec, exact_persistent_spread, generate_trace
from .store import load, manifest, save
from .virtual import (
    ModelInvalidError,
    PhysicalRegisterArray,
    SeedTable,
    extract_virtual_sketch,
    per_period_flow_cardinality,
    record,
    vi_hll_estimate,
    vi_hll_theoretical_stderr,
)

__version__ = "0.1.0"
