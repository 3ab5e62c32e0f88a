"""Shrinkage estimation for stratified Poisson counts with exact and Monte Carlo risk checks."""

from .errors import (
    CapabilityError,
    DomainError,
    NumericalError,
    ShapeError,
    TruncationError,
)
from .hierarchy import (
    HierarchySpec,
    ObservationSet,
    ParamTree,
    aggregate,
    build_param_tree,
    sample_observations,
)
from .priors import BetaPrior, PriorExponents, build_a_family, jeffreys_exponents
from .estimators import (
    BasicObs,
    EstimatorRule,
    MultiObs,
    conjugate_engine,
    estimate,
    estimate_basic,
    estimate_entropy,
    estimate_general,
    estimate_multi,
)
from .losses import (
    PredictiveWeights,
    balanced_entropy_loss,
    entropy_loss,
    plugin_predictive_kl,
    sse_loss,
)
from .risk import (
    ExactValue,
    RiskEstimate,
    exact_risk_basic,
    exact_risk_diff_basic,
    mc_risk,
    mc_risk_diff,
)

__version__ = "0.1.0"

__all__ = [
    "CapabilityError",
    "DomainError",
    "NumericalError",
    "ShapeError",
    "TruncationError",
    "HierarchySpec",
    "ObservationSet",
    "ParamTree",
    "aggregate",
    "build_param_tree",
    "sample_observations",
    "BetaPrior",
    "PriorExponents",
    "build_a_family",
    "jeffreys_exponents",
    "BasicObs",
    "EstimatorRule",
    "MultiObs",
    "conjugate_engine",
    "estimate",
    "estimate_basic",
    "estimate_entropy",
    "estimate_general",
    "estimate_multi",
    "PredictiveWeights",
    "balanced_entropy_loss",
    "entropy_loss",
    "plugin_predictive_kl",
    "sse_loss",
    "ExactValue",
    "RiskEstimate",
    "exact_risk_basic",
    "exact_risk_diff_basic",
    "mc_risk",
    "mc_risk_diff",
]
