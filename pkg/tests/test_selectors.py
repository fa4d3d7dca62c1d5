import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import cls_literal, gcv_literal, log_posterior_literal, ml_literal, random_spd
from sepinv.errors import BudgetExhausted, ConfigError
from sepinv.linalg import ForwardOperator, RegularizerGram
from sepinv.posterior import PriorSpec, ProblemDefinition
from sepinv.selectors import (FIXED_ALPHAS, OptimizerConfig, cls_fixed_alpha_fit, cls_residual,
                              gcv_score, latin_starts, minimize_selector, ml_score,
                              multistart_minimize, score)
from sepinv.toy import dense_random_problem, toy_scalar_problem

seeds = st.integers(0, 2**32 - 1)


def fixed_problem(a, u, gram=None):
    p = a.shape[1]
    rg = RegularizerGram.identity(p) if gram is None else RegularizerGram(p, gram)
    return ProblemDefinition(u, lambda m: ForwardOperator(a), rg, q=1)


# scores against closed forms and dense oracles

def test_scalar_zero_operator():
    prob = fixed_problem(np.zeros((1, 3)), np.array([1.7]))
    for fn in (gcv_score, ml_score, cls_residual):
        assert fn(prob, [0.0], 0.3) == pytest.approx(1.7**2, rel=1e-12)


def test_zero_operator_general_n():
    u = np.array([1.0, -2.0, 0.5, 3.0])
    prob = fixed_problem(np.zeros((4, 6)), u)
    assert gcv_score(prob, [0.0], 0.1) == pytest.approx(u @ u / 16, rel=1e-12)
    assert ml_score(prob, [0.0], 0.1) == pytest.approx(u @ u, rel=1e-12)
    assert cls_residual(prob, [0.0], 0.1) == pytest.approx(u @ u, rel=1e-12)


@given(seeds)
def test_scores_match_dense_oracles(seed):
    rng = np.random.default_rng(seed)
    n, p = int(rng.integers(2, 7)), int(rng.integers(2, 10))
    a, u = rng.standard_normal((n, p)), rng.standard_normal(n)
    gram = random_spd(rng, p)
    alpha = 10.0 ** rng.uniform(-2, 1)
    prob = fixed_problem(a, u, gram)
    assert gcv_score(prob, [0.0], alpha) == pytest.approx(gcv_literal(a, gram, alpha, u), rel=1e-8)
    assert ml_score(prob, [0.0], alpha) == pytest.approx(ml_literal(a, gram, alpha, u), rel=1e-8)
    assert cls_residual(prob, [0.0], alpha) == pytest.approx(cls_literal(a, gram, alpha, u),
                                                             rel=1e-6, abs=1e-12)


@given(seeds)
def test_scores_orthogonal_invariance(seed):
    rng = np.random.default_rng(seed)
    n, p = 5, 8
    a, u = rng.standard_normal((n, p)), rng.standard_normal(n)
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    base, rotated = fixed_problem(a, u), fixed_problem(q @ a, q @ u)
    for fn in (gcv_score, ml_score, cls_residual):
        assert fn(rotated, [0.0], 0.2) == pytest.approx(fn(base, [0.0], 0.2), rel=1e-8)


def test_ml_ties_to_log_posterior():
    prob, prior, _ = toy_scalar_problem()
    a = prob.operator([0.35]).dense_rows
    for alpha in (1e-4, 1e-2, 0.5):
        lp = log_posterior_literal(a, np.eye(prob.p), alpha, prob.data_u)
        assert -0.5 * prob.n * np.log(ml_score(prob, [0.35], alpha)) == pytest.approx(lp, rel=1e-9)


def test_score_wrapper():
    prob, _, _ = toy_scalar_problem()
    s = score(prob, "GCV", 0.3, 1e-3)
    assert s.criterion == "GCV" and s.alpha == 1e-3 and s.m.shape == (1,)
    with pytest.raises(ValueError):
        score(prob, "AIC", 0.3, 1e-3)


# optimizer on stubs

BOX2 = PriorSpec([-1.0], [1.0], (-5.0, 0.0))


def test_bowl_stub():
    centre = np.array([0.3, -2.2])
    res = minimize_selector(None, lambda th: float(np.sum((th - centre) ** 2)), BOX2)
    np.testing.assert_allclose(res.m, centre[:1], atol=1e-3)
    assert np.log10(res.alpha) == pytest.approx(centre[1], abs=1e-3)
    assert not res.budget_exhausted


def test_two_well_stub_finds_global():
    deep, shallow = np.array([-0.7, -4.0]), np.array([0.7, -1.0])

    def wells(th):
        return float(min(np.sum((th - deep) ** 2) - 1.0, np.sum((th - shallow) ** 2) - 0.5))

    res = minimize_selector(None, wells, BOX2)
    np.testing.assert_allclose(np.append(res.m, np.log10(res.alpha)), deep, atol=1e-3)


def test_result_stays_in_support():
    prior = PriorSpec([-1.0, -1.0], [1.0, 1.0], (-5.0, 0.0),
                      support_predicate=lambda m: m[0] + m[1] >= 0.5)
    calls = []

    def f(th):
        calls.append(th.copy())
        return float(np.sum(th[:2] ** 2) + (th[2] + 3) ** 2)

    res = minimize_selector(None, f, prior)
    theta = np.append(res.m, np.log10(res.alpha))
    assert prior.contains(theta)
    assert all(prior.contains(c) for c in calls)
    np.testing.assert_allclose(res.m, [0.25, 0.25], atol=2e-3)


def test_optimizer_deterministic():
    prob, prior, _ = dense_random_problem(q=1)
    cfg = OptimizerConfig(n_starts=4, max_evals=400, seed=3)
    a = minimize_selector(prob, "GCV", prior, cfg)
    b = minimize_selector(prob, "GCV", prior, cfg)
    np.testing.assert_array_equal(a.m, b.m)
    assert a.alpha == b.alpha and a.evaluations == b.evaluations


def test_budget_exhaustion():
    cfg = OptimizerConfig(n_starts=3, max_evals=6)
    res = minimize_selector(None, lambda th: float(np.sum(th**2)), BOX2, cfg)
    assert res.budget_exhausted and res.evaluations <= 6
    with pytest.raises(BudgetExhausted) as info:
        minimize_selector(None, lambda th: float(np.sum(th**2)), BOX2, cfg, raise_on_budget=True)
    assert info.value.best is not None


def test_injected_start_used_first():
    res = multistart_minimize(lambda x: float(np.sum(x**2)), [-1, -1], [1, 1],
                              OptimizerConfig(n_starts=2, max_evals=200), injected=[[0.5, 0.5]])
    assert res.starts[0]["start"] == [0.5, 0.5]
    with pytest.raises(ConfigError):
        multistart_minimize(lambda x: 0.0, [-1], [1], OptimizerConfig(n_starts=1, max_evals=10),
                            injected=[[3.0]])


def test_optimizer_config_validation():
    with pytest.raises(ConfigError):
        OptimizerConfig(n_starts=0).validate()
    with pytest.raises(ConfigError):
        OptimizerConfig(n_starts=10, max_evals=5).validate()
    with pytest.raises(ValueError):
        minimize_selector(None, "CLS", BOX2)


def test_latin_starts_cover_box():
    pts = latin_starts([0, 10], [1, 20], 40, np.random.default_rng(0))
    assert pts.shape == (40, 2)
    # one point per stratum in every coordinate
    assert sorted(np.floor(pts[:, 0] * 40).astype(int)) == list(range(40))


# fixed-alpha fits

def test_cls_four_alphas():
    calls = []

    def stub(m, alpha):
        calls.append(alpha)
        return float((m[0] - np.log10(alpha) / 10) ** 2)

    fits = cls_fixed_alpha_fit(None, FIXED_ALPHAS, BOX2, OptimizerConfig(n_starts=3, max_evals=300),
                               objective=stub)
    assert [f.alpha for f in fits] == list(FIXED_ALPHAS)
    for f in fits:
        assert f.m[0] == pytest.approx(np.log10(f.alpha) / 10, abs=1e-3)
        assert f.record()["criterion"] == "CLS"
    assert set(calls) == set(FIXED_ALPHAS)


def test_cls_objective_is_misfit_energy():
    prob, prior, truth = dense_random_problem(q=1)
    fits = cls_fixed_alpha_fit(prob, [1e-2], prior, OptimizerConfig(n_starts=3, max_evals=300))
    a = prob.operator(fits[0].m).dense_rows
    g = np.linalg.solve(a.T @ a + 1e-2 * np.eye(prob.p), a.T @ prob.data_u)
    energy = np.sum((prob.data_u - a @ g) ** 2) + 1e-2 * g @ g
    assert fits[0].value == pytest.approx(energy, rel=1e-8)
    with pytest.raises(ValueError):
        cls_fixed_alpha_fit(prob, [], prior)
