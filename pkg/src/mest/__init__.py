"""Convex M-estimation for linear models with heavy-tailed errors."""
from .design import (
    DesignGenSpec,
    DesignSummary,
    NormalizedDesign,
    SingularGram,
    generate_design,
    leverage_decay_fit,
    normalize,
    summarize,
    trace_inequality_holds,
)
from .harness import ExperimentConfig, regime_contrast, run_experiment, summarize_experiment
from .losses import ConditionReport, ConvexLoss, increment_bound
from .probability import (
    BoundedVarSpec,
    ErrorDistribution,
    NonIntegrable,
    bennett_bound,
    check_identification,
    verify_bennett,
    verify_weighted_slln,
)
from .solver import BoxSpec, FitResult, NotConverged, SolverOpts, brute_force_fit, dn_trace, fit, objective

__version__ = "0.1.0"

__all__ = [
    "BoundedVarSpec", "BoxSpec", "ConditionReport", "ConvexLoss", "DesignGenSpec", "DesignSummary",
    "ErrorDistribution", "ExperimentConfig", "FitResult", "NonIntegrable", "NormalizedDesign",
    "NotConverged", "SingularGram", "SolverOpts", "bennett_bound", "brute_force_fit",
    "check_identification", "dn_trace", "fit", "generate_design", "increment_bound",
    "leverage_decay_fit", "normalize", "objective", "regime_contrast", "run_experiment",
    "summarize", "summarize_experiment", "trace_inequality_holds", "verify_bennett",
    "verify_weighted_slln",
]
