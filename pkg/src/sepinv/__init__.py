"""Bayesian inversion for linear models with a few nonlinear parameters.

The data model is u = A_m g + noise, where the operator A_m depends on a short
parameter vector m and g is regularized by alpha ||R g||^2. The package samples
the joint posterior of (m, alpha) with the noise level and g profiled out, and
includes the classical alpha selectors (GCV, ML, CLS) for comparison.
"""

__version__ = "0.1.0"

from .errors import (BudgetExhausted, ConfigError, DegenerateGeometry, DimensionMismatch,
                     EmptySupport, FactorizationFailure, InvalidWeights, NonConvergence,
                     SamplerAborted, SepinvError)
from .linalg import (ForwardOperator, KroneckerSumGram, LowRankFactor, RegularizerGram,
                     logdet_term, misfit_quadratic, solve_regularized)
from .posterior import (LogDensityValue, PosteriorEvaluator, PriorSpec, ProblemDefinition,
                        log_posterior, marginal_log_likelihood, posterior_grid, sigma_max)
from .samplers import (ChainState, SamplerConfig, TransitionMatrix, build_transition_matrix,
                       initial_point, parallel_chain_run, propose, single_chain_run,
                       update_covariance)
from .selectors import (OptimizerConfig, cls_fixed_alpha_fit, cls_residual, gcv_score,
                        minimize_selector, ml_score)

__all__ = [
    "BudgetExhausted", "ConfigError", "DegenerateGeometry", "DimensionMismatch", "EmptySupport",
    "FactorizationFailure", "InvalidWeights", "NonConvergence", "SamplerAborted", "SepinvError",
    "ForwardOperator", "KroneckerSumGram", "LowRankFactor", "RegularizerGram", "logdet_term",
    "misfit_quadratic", "solve_regularized", "LogDensityValue", "PosteriorEvaluator", "PriorSpec",
    "ProblemDefinition", "log_posterior", "marginal_log_likelihood", "posterior_grid", "sigma_max",
    "ChainState", "SamplerConfig", "TransitionMatrix", "build_transition_matrix", "initial_point",
    "parallel_chain_run", "propose", "single_chain_run", "update_covariance", "OptimizerConfig",
    "cls_fixed_alpha_fit", "cls_residual", "gcv_score", "minimize_selector", "ml_score",
]
