"""Quick self-checks of the core identities on random small instances.

Each check compares a fast path against a dense construction and returns
``(name, passed, detail)``. The suite runs in a few seconds.
"""

from __future__ import annotations

import numpy as np

from .linalg import ForwardOperator, LowRankFactor, RegularizerGram, solve_regularized
from .posterior import PosteriorEvaluator, PriorSpec, ProblemDefinition
from .samplers import build_transition_matrix
from .selectors import gcv_score, ml_score


def _random_spd(rng, p):
    x = rng.standard_normal((p, p))
    return x @ x.T + p * np.eye(p)


def _instance(rng):
    n, p = int(rng.integers(1, 9)), int(rng.integers(1, 13))
    a = rng.standard_normal((n, p))
    gram = _random_spd(rng, p)
    alpha = 10.0 ** rng.uniform(-6, 2)
    u = rng.standard_normal(n)
    return a, gram, alpha, u


def check_determinant(rng, count=200):
    worst = 0.0
    for _ in range(count):
        a, gram, alpha, _ = _instance(rng)
        n, p = a.shape
        small = LowRankFactor.build(ForwardOperator(a), RegularizerGram(p, gram), alpha).logdet_small
        rinv = np.linalg.inv(np.linalg.cholesky(gram).T)
        at = a @ rinv
        big = np.linalg.slogdet(np.eye(p) + at.T @ at / alpha)[1]
        worst = max(worst, abs(small - big) / max(1.0, abs(big)))
    return "log det identity", bool(worst < 1e-9), f"max rel err {worst:.2e}"


def check_energy(rng, count=200):
    worst = 0.0
    for _ in range(count):
        a, gram, alpha, u = _instance(rng)
        op, rg = ForwardOperator(a), RegularizerGram(a.shape[1], gram)
        quad = LowRankFactor.build(op, rg, alpha).quad(u)
        g = np.linalg.solve(a.T @ a + alpha * gram, a.T @ u)
        r = u - a @ g
        energy = r @ r + alpha * g @ gram @ g
        worst = max(worst, abs(quad - energy) / abs(energy))
    return "misfit equals regularized energy", bool(worst < 1e-8), f"max rel err {worst:.2e}"


def check_solver(rng, count=50):
    worst = 0.0
    for _ in range(count):
        a, gram, alpha, u = _instance(rng)
        alpha = max(alpha, 1e-3)
        g = solve_regularized(ForwardOperator(a), RegularizerGram(a.shape[1], gram), alpha, u)
        ref = np.linalg.solve(a.T @ a + alpha * gram, a.T @ u)
        worst = max(worst, np.linalg.norm(g - ref) / max(np.linalg.norm(ref), 1e-300))
    return "regularized solve", bool(worst < 1e-7), f"max rel err {worst:.2e}"


def check_transition(rng, count=10_000):
    worst = 0.0
    bad = 0
    for _ in range(count):
        k = int(rng.integers(2, 10))
        lw = rng.normal(0, 3, k)
        lw[1:][rng.random(k - 1) < 0.2] = -np.inf
        t = build_transition_matrix(lw).entries
        worst = max(worst, np.max(np.abs(t.sum(axis=1) - 1)))
        bad += int(np.any(t < 0) or np.any(t > 1))
    ok = worst < 1e-12 and bad == 0
    return "transition matrix rows", ok, f"max row error {worst:.1e}, {bad} out-of-range"


def check_selectors(rng, count=100):
    worst = 0.0
    for _ in range(count):
        a, gram, alpha, u = _instance(rng)
        alpha = max(alpha, 1e-4)
        n, p = a.shape
        prob = ProblemDefinition(u, lambda m, a=a: ForwardOperator(a), RegularizerGram(p, gram), 1)
        hat = a @ np.linalg.solve(a.T @ a + alpha * gram, a.T)
        comp = np.eye(n) - hat
        r = comp @ u
        gcv = (r @ r) / np.trace(comp) ** 2
        ml = (u @ comp @ u) / np.linalg.det(comp) ** (1.0 / n)
        for fast, ref in ((gcv_score(prob, [0.0], alpha), gcv), (ml_score(prob, [0.0], alpha), ml)):
            worst = max(worst, abs(fast - ref) / abs(ref))
    return "GCV and ML scores", bool(worst < 1e-8), f"max rel err {worst:.2e}"


def check_sigma_profile(rng, count=20):
    worst = 0.0
    for _ in range(count):
        a, gram, alpha, u = _instance(rng)
        p = a.shape[1]
        prob = ProblemDefinition(u, lambda m, a=a: ForwardOperator(a), RegularizerGram(p, gram), 1)
        prior = PriorSpec([0.0], [0.0], (-6.0, 2.0))
        value = PosteriorEvaluator(prob, prior).evaluate([0.0], alpha)
        factor = LowRankFactor.build(ForwardOperator(a), RegularizerGram(p, gram), alpha)
        worst = max(worst, abs(value.sigma_max_sq - factor.quad(u) / a.shape[0])
                    / value.sigma_max_sq)
    return "sigma_max^2 = misfit / n", bool(worst < 1e-12), f"max rel err {worst:.2e}"


CHECKS = (check_determinant, check_energy, check_solver, check_transition, check_selectors,
          check_sigma_profile)


def run_checks(seed: int = 0):
    rng = np.random.default_rng(seed)
    return [check(rng) for check in CHECKS]
