"""
Noise-marginalized posterior over (m, alpha).

For fixed (m, alpha) the noise level is replaced by its likelihood maximizer

    sigma_max^2 = (alpha ||R g_min||^2 + ||u - A g_min||^2) / n

which leaves the non-normalized log density

    log R(m, alpha) = -1/2 log det B - n/2 log(u' B^-1 u) + log prior(m, alpha)

with B = I_n + alpha^-1 A (R'R)^-1 A'. Sampling coordinates are
theta = (m, log10 alpha); the prior is flat in log10 alpha.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import trapezoid

from .errors import DimensionMismatch, EmptySupport, FactorizationFailure
from .linalg import ForwardOperator, LowRankFactor, RegularizerGram, small_kernel

logger = logging.getLogger(__name__)

MAX_CONSECUTIVE_REJECTIONS = 10**6


@dataclass
class ProblemDefinition:
    data_u: np.ndarray
    operator_factory: Callable[[np.ndarray], ForwardOperator]
    gram: RegularizerGram
    q: int

    def __post_init__(self):
        self.data_u = np.asarray(self.data_u, dtype=float)
        if self.data_u.ndim != 1:
            raise DimensionMismatch("data must be a vector")
        if not np.any(self.data_u != 0):
            raise ValueError("data vector must be nonzero")

    @property
    def n(self) -> int:
        return self.data_u.shape[0]

    @property
    def p(self) -> int:
        return self.gram.p

    def operator(self, m) -> ForwardOperator:
        op = self.operator_factory(np.asarray(m, dtype=float))
        if op.n != self.n or op.p != self.p:
            raise DimensionMismatch(f"factory built a {op.n}x{op.p} operator, expected {self.n}x{self.p}")
        return op

    def factor(self, m, alpha) -> tuple[ForwardOperator, LowRankFactor]:
        op = self.operator(m)
        return op, LowRankFactor.from_kernel(small_kernel(op, self.gram), alpha, m_param=m)


@dataclass
class PriorSpec:
    """Uniform prior on a box in m, times a flat prior on log10 alpha.

    ``support_predicate`` adds constraints that the box cannot express. Box
    bounds are closed; use the predicate for strict inequalities.
    """

    m_low: np.ndarray
    m_high: np.ndarray
    log10_alpha_range: tuple[float, float] = (-5.0, 0.0)
    support_predicate: Optional[Callable[[np.ndarray], bool]] = None

    def __post_init__(self):
        self.m_low = np.atleast_1d(np.asarray(self.m_low, dtype=float))
        self.m_high = np.atleast_1d(np.asarray(self.m_high, dtype=float))
        if self.m_low.shape != self.m_high.shape or np.any(self.m_low > self.m_high):
            raise ValueError("invalid prior box")
        lo, hi = self.log10_alpha_range
        if lo > hi:
            raise ValueError("invalid log10 alpha range")
        self.log10_alpha_range = (float(lo), float(hi))
        self._lower = np.append(self.m_low, lo).astype(float)
        self._upper = np.append(self.m_high, hi).astype(float)

    @property
    def q(self) -> int:
        return self.m_low.shape[0]

    @property
    def dim(self) -> int:
        return self.q + 1

    @property
    def lower(self) -> np.ndarray:
        return self._lower.copy()

    @property
    def upper(self) -> np.ndarray:
        return self._upper.copy()

    def contains(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        # NaN fails both comparisons, so it is rejected here too
        if not (np.all(theta >= self._lower) and np.all(theta <= self._upper)):
            return False
        if self.support_predicate is not None and not self.support_predicate(theta[:-1]):
            return False
        return True

    def density(self, m, alpha) -> float:
        if not alpha > 0:
            return 0.0
        theta = np.append(np.asarray(m, dtype=float), np.log10(alpha))
        return 1.0 if self.contains(theta) else 0.0

    def log_density(self, theta) -> float:
        return 0.0 if self.contains(theta) else -np.inf

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """``size`` draws in theta coordinates, by rejection from the box."""
        out = np.empty((size, self.dim))
        lo, hi = self.lower, self.upper
        filled = 0
        misses = 0
        batch = max(16, size)
        while filled < size:
            cand = lo + (hi - lo) * rng.random((batch, self.dim))
            for row in cand:
                if self.support_predicate is None or self.support_predicate(row[:-1]):
                    out[filled] = row
                    filled += 1
                    misses = 0
                    if filled == size:
                        break
                else:
                    misses += 1
                    if misses >= MAX_CONSECUTIVE_REJECTIONS:
                        raise EmptySupport(f"{misses} consecutive draws fell outside the support")
        return out


@dataclass
class LogDensityValue:
    log_value: float
    sigma_max_sq: float = np.nan
    misfit: float = np.nan
    logdet: float = np.nan


class PosteriorEvaluator:
    """log R(m, alpha) for one data set and prior.

    Calling the evaluator with theta = (m, log10 alpha) returns the float log
    density, which is the form the samplers use. Outside the prior support no
    operator is built.
    """

    def __init__(self, problem: ProblemDefinition, prior: PriorSpec):
        if prior.q != problem.q:
            raise DimensionMismatch(f"prior has q={prior.q}, problem has q={problem.q}")
        self.problem = problem
        self.prior = prior
        self.clamp_count = 0
        self._u_sq = float(problem.data_u @ problem.data_u)

    @property
    def dim(self) -> int:
        return self.prior.dim

    def evaluate(self, m, alpha) -> LogDensityValue:
        m = np.atleast_1d(np.asarray(m, dtype=float))
        if not (alpha > 0 and self.prior.contains(np.append(m, np.log10(alpha)))):
            return LogDensityValue(-np.inf)
        return self._evaluate_supported(m, alpha)

    def _evaluate_supported(self, m, alpha) -> LogDensityValue:
        n = self.problem.n
        _, factor = self.problem.factor(m, alpha)
        misfit = factor.quad(self.problem.data_u)
        if not misfit > 0:
            self.clamp_count += 1
            logger.warning("non-positive misfit %.3e clamped at m=%s alpha=%.3e", misfit, m, alpha)
            misfit = np.finfo(float).eps * self._u_sq
        logdet = factor.logdet_small
        # flat prior: log density 0 on the support
        value = -0.5 * logdet - 0.5 * n * np.log(misfit)
        return LogDensityValue(float(value), misfit / n, misfit, logdet)

    def __call__(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        if not self.prior.contains(theta):
            return -np.inf
        return self._evaluate_supported(theta[:-1], 10.0 ** theta[-1]).log_value


def log_posterior(prob: ProblemDefinition, prior: PriorSpec, m, alpha) -> LogDensityValue:
    return PosteriorEvaluator(prob, prior).evaluate(m, alpha)


def sigma_max(prob: ProblemDefinition, m, alpha) -> float:
    """Noise variance maximizing the marginal likelihood of u."""
    _, factor = prob.factor(m, alpha)
    return factor.quad(prob.data_u) / prob.n


def marginal_log_likelihood(prob: ProblemDefinition, m, alpha, sigma) -> float:
    """log density of u given (sigma, m, alpha) with g integrated out.

    The alpha^(p/2) factor and det(A'A + alpha R'R)^(-1/2) combine into
    det(B)^(-1/2), up to the m-independent factor det(R'R)^(1/2).
    """
    _, factor = prob.factor(m, alpha)
    n = prob.n
    s2 = float(sigma) ** 2
    return (-0.5 * n * np.log(2 * np.pi * s2) - factor.quad(prob.data_u) / (2 * s2)
            - 0.5 * factor.logdet_small)


@dataclass
class GridResult:
    m_grid: np.ndarray
    log10_alpha_grid: np.ndarray
    table: np.ndarray
    errors: dict

    def marginals(self):
        """Quadrature-normalized marginal densities (in m, in log10 alpha).

        Only meaningful for scalar m.
        """
        return grid_marginals(self.table, self.m_grid.ravel(), self.log10_alpha_grid)


def posterior_grid(evaluator: PosteriorEvaluator, m_grid, log10_alpha_grid) -> GridResult:
    """Evaluate log R on every (m, log10 alpha) node.

    Failures are recorded per node in ``errors`` and stored as NaN.
    """
    m_grid = np.asarray(m_grid, dtype=float)
    if m_grid.ndim == 1:
        m_grid = m_grid[:, None]
    a_grid = np.asarray(log10_alpha_grid, dtype=float)
    if m_grid.shape[0] == 0 or a_grid.size == 0:
        raise ValueError("grids must be nonempty")
    table = np.empty((m_grid.shape[0], a_grid.size))
    errors = {}
    for i, m in enumerate(m_grid):
        for j, a in enumerate(a_grid):
            try:
                table[i, j] = evaluator(np.append(m, a))
            except FactorizationFailure as exc:
                table[i, j] = np.nan
                errors[(i, j)] = exc
    return GridResult(m_grid, a_grid, table, errors)


def grid_marginals(table, m_axis: Sequence[float], a_axis: Sequence[float]):
    """Normalized marginals of exp(table) by the trapezoid rule."""
    m_axis = np.asarray(m_axis, dtype=float)
    a_axis = np.asarray(a_axis, dtype=float)
    logt = np.where(np.isfinite(table), table, -np.inf)
    dens = np.exp(logt - np.max(logt))
    m_marg = trapezoid(dens, a_axis, axis=1) if a_axis.size > 1 else dens[:, 0]
    a_marg = trapezoid(dens, m_axis, axis=0) if m_axis.size > 1 else dens[0, :]
    if m_axis.size > 1:
        m_marg = m_marg / trapezoid(m_marg, m_axis)
    if a_axis.size > 1:
        a_marg = a_marg / trapezoid(a_marg, a_axis)
    return m_marg, a_marg
