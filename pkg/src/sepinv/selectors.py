"""
Baseline choices of the regularization parameter, and a multistart optimizer.

All three scores work from the n x n matrix B = I_n + alpha^-1 A (R'R)^-1 A'.
Its inverse is the complement of the hat matrix, I - A (A'A + alpha R'R)^-1 A',
so

* GCV  = ||B^-1 u||^2 / tr(B^-1)^2
* ML   = u' B^-1 u * det(B)^(1/n)
* CLS  = ||u - A g_min||^2   (evaluated from an explicit g_min)

The optimizer runs Nelder-Mead from Latin-hypercube starts inside the prior
support, over theta = (m, log10 alpha).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize
from scipy.stats import qmc

from .errors import BudgetExhausted, ConfigError, FactorizationFailure, NonConvergence
from .linalg import solve_regularized
from .posterior import PriorSpec, ProblemDefinition

logger = logging.getLogger(__name__)

CRITERIA = ("GCV", "ML", "CLS")
FIXED_ALPHAS = (1e-4, 1e-3, 1e-2, 1e-1)
MAX_START_BATCHES = 1000


@dataclass
class SelectorScore:
    criterion: str
    value: float
    alpha: float
    m: np.ndarray


def gcv_score(prob: ProblemDefinition, m, alpha) -> float:
    _, factor = prob.factor(m, alpha)
    r = factor.solve(prob.data_u)
    linv = sla.solve_triangular(factor.chol_small, np.eye(prob.n), lower=True, check_finite=False)
    trace = float(np.sum(linv * linv))
    return float(r @ r) / trace**2


def ml_score(prob: ProblemDefinition, m, alpha) -> float:
    _, factor = prob.factor(m, alpha)
    return float(np.exp(np.log(factor.quad(prob.data_u)) + factor.logdet_small / prob.n))


def cls_residual(prob: ProblemDefinition, m, alpha) -> float:
    op = prob.operator(m)
    g = solve_regularized(op, prob.gram, alpha, prob.data_u)
    r = prob.data_u - op.apply(g)
    return float(r @ r)


_SCORES = {"GCV": gcv_score, "ML": ml_score, "CLS": cls_residual}


def score(prob: ProblemDefinition, criterion: str, m, alpha) -> SelectorScore:
    if criterion not in _SCORES:
        raise ValueError(f"unknown criterion {criterion!r}")
    m = np.atleast_1d(np.asarray(m, dtype=float))
    return SelectorScore(criterion, _SCORES[criterion](prob, m, alpha), float(alpha), m)


@dataclass
class OptimizerConfig:
    n_starts: int = 30
    max_evals: int = 3000
    local_tol: float = 1e-4
    seed: int = 0
    initial_step: float = 0.1  # simplex edge, as a fraction of the box width

    def validate(self):
        if self.n_starts < 1:
            raise ConfigError("n_starts must be >= 1")
        if self.max_evals < self.n_starts:
            raise ConfigError("max_evals must be >= n_starts")
        if not self.local_tol > 0:
            raise ConfigError("local_tol must be positive")
        if not 0 < self.initial_step <= 1:
            raise ConfigError("initial_step must lie in (0, 1]")
        return self


@dataclass
class OptimizationResult:
    x: np.ndarray
    value: float
    evaluations: int
    budget_exhausted: bool
    starts: list = field(default_factory=list)


@dataclass
class SelectorResult:
    criterion: str
    m: np.ndarray
    alpha: float
    score: float
    evaluations: int
    budget_exhausted: bool

    def record(self) -> dict:
        return {"criterion": self.criterion, "m": [float(v) for v in self.m],
                "alpha": self.alpha, "log10_alpha": float(np.log10(self.alpha)),
                "score": self.score, "evaluations": self.evaluations,
                "budget_exhausted": self.budget_exhausted}


def latin_starts(lower, upper, count: int, rng: np.random.Generator,
                 accept: Optional[Callable[[np.ndarray], bool]] = None) -> np.ndarray:
    """``count`` Latin-hypercube points in the box that pass ``accept``.

    Batches are drawn until enough points are accepted.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    sampler = qmc.LatinHypercube(d=lower.size, seed=rng)
    out = []
    for _ in range(MAX_START_BATCHES):
        pts = lower + (upper - lower) * sampler.random(count)
        out.extend(p for p in pts if accept is None or accept(p))
        if len(out) >= count:
            return np.array(out[:count])
    raise ConfigError(f"could not place {count} starts in the support")


def _initial_simplex(x0, lower, upper, frac):
    width = np.where(upper > lower, upper - lower, 1.0)
    simplex = [x0]
    for i in range(x0.size):
        v = x0.copy()
        step = frac * width[i]
        v[i] = x0[i] + step if x0[i] + step <= upper[i] else x0[i] - step
        simplex.append(v)
    return np.array(simplex)


def multistart_minimize(objective: Callable[[np.ndarray], float], lower, upper,
                        config: OptimizerConfig, support: Optional[Callable] = None,
                        injected: Sequence = ()) -> OptimizationResult:
    """Nelder-Mead from injected starts first, then Latin-hypercube starts.

    ``objective`` is only called inside the box and ``support``; elsewhere the
    value is +inf. The budget counts objective calls; the remaining budget is
    shared evenly among the starts still to run.
    """
    config.validate()
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)

    def inside(x):
        return bool(np.all(x >= lower) and np.all(x <= upper) and (support is None or support(x)))

    injected = [np.asarray(s, dtype=float) for s in injected][: config.n_starts]
    for s in injected:
        if not inside(s):
            raise ConfigError(f"injected start {s} lies outside the support")
    rng = np.random.default_rng(config.seed)
    n_random = config.n_starts - len(injected)
    starts = list(injected)
    if n_random > 0:
        starts.extend(latin_starts(lower, upper, n_random, rng, inside))

    count = 0
    best_x, best_f = starts[0].copy(), np.inf

    def f(x):
        nonlocal count, best_x, best_f
        if not inside(x):
            return np.inf
        count += 1
        try:
            v = float(objective(x))
        except (FactorizationFailure, NonConvergence) as exc:
            logger.info("objective failed at %s: %s", x, exc)
            v = np.inf
        if np.isnan(v):
            v = np.inf
        if v < best_f:
            best_x, best_f = x.copy(), v
        return v

    exhausted = False
    records = []
    for i, x0 in enumerate(starts):
        remaining = config.max_evals - count
        if remaining <= 0:
            exhausted = True
            break
        share = max(1, remaining // (len(starts) - i))
        res = minimize(f, x0, method="Nelder-Mead",
                       options={"maxfev": share, "xatol": config.local_tol,
                                "fatol": config.local_tol,
                                "initial_simplex": _initial_simplex(x0, lower, upper,
                                                                    config.initial_step)})
        converged = bool(res.success)
        records.append({"start": x0.tolist(), "x": np.asarray(res.x).tolist(),
                        "value": float(res.fun), "converged": converged})
        if not converged and res.nfev >= share:
            exhausted = True
    return OptimizationResult(best_x, best_f, count, exhausted, records)


def _criterion_objective(prob, criterion):
    if callable(criterion):
        return criterion
    if criterion not in ("GCV", "ML"):
        raise ValueError(f"criterion must be 'GCV', 'ML' or a callable, got {criterion!r}")
    fn = _SCORES[criterion]
    return lambda theta: fn(prob, theta[:-1], 10.0 ** theta[-1])


def minimize_selector(prob: Optional[ProblemDefinition], criterion: Union[str, Callable],
                      prior: PriorSpec, opt_config: Optional[OptimizerConfig] = None,
                      injected: Sequence = (), raise_on_budget: bool = False) -> SelectorResult:
    """Minimize a selector score jointly over (m, log10 alpha) inside the prior support.

    ``criterion`` is 'GCV', 'ML' or a callable theta -> value. When
    ``raise_on_budget`` is set, running out of evaluations raises
    :class:`BudgetExhausted` with the best result attached.
    """
    opt_config = opt_config or OptimizerConfig()
    objective = _criterion_objective(prob, criterion)
    res = multistart_minimize(objective, prior.lower, prior.upper, opt_config,
                              support=prior.contains, injected=injected)
    name = criterion if isinstance(criterion, str) else getattr(criterion, "__name__", "custom")
    result = SelectorResult(name, res.x[:-1].copy(), float(10.0 ** res.x[-1]), res.value,
                            res.evaluations, res.budget_exhausted)
    if res.budget_exhausted and raise_on_budget:
        raise BudgetExhausted(f"{name}: evaluation budget of {opt_config.max_evals} used up", result)
    return result


@dataclass
class FixedAlphaFit:
    alpha: float
    m: np.ndarray
    value: float
    evaluations: int
    budget_exhausted: bool

    def record(self) -> dict:
        return {"criterion": "CLS", "alpha": self.alpha, "m": [float(v) for v in self.m],
                "misfit": self.value, "evaluations": self.evaluations,
                "budget_exhausted": self.budget_exhausted}


def cls_fixed_alpha_fit(prob: ProblemDefinition, alpha_list, prior: PriorSpec,
                        opt_config: Optional[OptimizerConfig] = None,
                        injected_m: Sequence = (), objective: Optional[Callable] = None,
                        raise_on_budget: bool = False) -> list[FixedAlphaFit]:
    """For each fixed alpha, minimize min_g ||A_m g - u||^2 + alpha ||R g||^2 over m.

    The inner minimum over g is u' B^-1 u. ``objective(m, alpha)`` replaces it
    for test stubs.
    """
    alphas = [float(a) for a in alpha_list]
    if not alphas:
        raise ValueError("alpha_list must not be empty")
    opt_config = opt_config or OptimizerConfig()
    if objective is None:
        def objective(m, alpha):
            _, factor = prob.factor(m, alpha)
            return factor.quad(prob.data_u)

    m_lo, m_hi = prior.m_low, prior.m_high
    pred = prior.support_predicate
    fits = []
    for alpha in alphas:
        res = multistart_minimize(lambda m, a=alpha: objective(m, a), m_lo, m_hi, opt_config,
                                  support=pred, injected=injected_m)
        fit = FixedAlphaFit(alpha, res.x, res.value, res.evaluations, res.budget_exhausted)
        if res.budget_exhausted and raise_on_budget:
            raise BudgetExhausted(f"CLS at alpha={alpha}: evaluation budget used up", fit)
        fits.append(fit)
    return fits
