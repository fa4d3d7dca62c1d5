"""Small synthetic problems used by the validation suite and the runner."""

from __future__ import annotations

import numpy as np

from .linalg import ForwardOperator, RegularizerGram
from .posterior import PriorSpec, ProblemDefinition


class SmoothingKernelFamily:
    """A_m[i, j] = w * m / ((s_i - t_j)^2 + m^2)^(3/2) on the unit interval.

    ``m`` plays the role of a source depth: larger m gives a smoother,
    weaker response at the receivers ``s``.
    """

    def __init__(self, n=20, p=50):
        self.stations = np.linspace(0.0, 1.0, n)
        self.sources = np.linspace(0.0, 1.0, p)
        self.weight = 1.0 / p

    def __call__(self, m) -> ForwardOperator:
        depth = float(np.atleast_1d(m)[0])
        dx = self.stations[:, None] - self.sources[None, :]
        return ForwardOperator(self.weight * depth / (dx**2 + depth**2) ** 1.5)


def toy_scalar_problem(n=20, p=50, m_true=0.3, noise=0.02, seed=0,
                       m_range=(0.1, 0.6), log10_alpha_range=(-5.0, 0.0)):
    """Scalar-m inverse problem with a smooth bump source and white noise.

    ``noise`` is relative to the largest noise-free datum. Returns
    ``(problem, prior, truth)``.
    """
    family = SmoothingKernelFamily(n, p)
    t = family.sources
    g_true = np.exp(-0.5 * ((t - 0.45) / 0.12) ** 2)
    u_free = family(m_true).apply(g_true)
    rng = np.random.default_rng(seed)
    sigma = noise * np.max(np.abs(u_free))
    u = u_free + sigma * rng.standard_normal(n)
    problem = ProblemDefinition(u, family, RegularizerGram.identity(p), q=1)
    prior = PriorSpec([m_range[0]], [m_range[1]], log10_alpha_range)
    return problem, prior, {"m": np.array([m_true]), "g": g_true, "u_free": u_free, "sigma": sigma}


class AffineDenseFamily:
    """A_m = A_0 + sum_k m_k A_k with fixed Gaussian coefficient tables."""

    def __init__(self, n, p, q, seed=0):
        rng = np.random.default_rng(seed)
        self.tables = rng.standard_normal((q + 1, n, p)) / np.sqrt(p)

    def __call__(self, m) -> ForwardOperator:
        m = np.atleast_1d(np.asarray(m, dtype=float))
        return ForwardOperator(self.tables[0] + np.tensordot(m, self.tables[1:], axes=1))


def dense_random_problem(n=12, p=30, q=2, seed=0, noise=0.05):
    family = AffineDenseFamily(n, p, q, seed)
    rng = np.random.default_rng(seed + 1)
    m_true = rng.uniform(-0.5, 0.5, q)
    g_true = rng.standard_normal(p)
    u_free = family(m_true).apply(g_true)
    u = u_free + noise * np.max(np.abs(u_free)) * rng.standard_normal(n)
    problem = ProblemDefinition(u, family, RegularizerGram.identity(p), q=q)
    prior = PriorSpec(-np.ones(q), np.ones(q), (-5.0, 0.0))
    return problem, prior, {"m": m_true, "g": g_true, "u_free": u_free}
