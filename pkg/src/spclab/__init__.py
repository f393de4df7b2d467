"""Finite-dimensional laboratory for posterior contraction under non-commuting operators."""

from .bounds import (
    BoundReport,
    CaseClassification,
    balance_alpha,
    bias_bound,
    bias_bound_qualification,
    classify_case,
    saturation_probe,
    spc_bound,
    spread_bound,
)
from .experiments import ExperimentConfig, RateStudyResult, fit_loglog, run_dominance_sweep, run_rate_study
from .index_calc import (
    IndexFunction,
    check_precedes,
    f0_from_theta,
    invert_monotone,
    make_power,
    refute_operator_concavity,
    sobolev_phi,
    theta_from_psi,
)
from .opspace import (
    Distortion,
    ProblemInstance,
    SymOperator,
    apply_function,
    certify_link,
    douglas_check,
    loewner_leq,
    make_commuting_instance,
    make_heat_instance,
    make_noncommuting_instance,
)
from .posterior_core import (
    PosteriorSummary,
    SmoothnessSpec,
    bias,
    make_smoothness,
    posterior_cov,
    posterior_mean,
    sample_data,
    spc_closed,
    spc_monte_carlo,
    spread,
    variance,
)

__version__ = "0.1.0"
