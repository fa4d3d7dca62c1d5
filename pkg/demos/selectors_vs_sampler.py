"""Point estimates from GCV, ML and fixed-alpha least squares next to the posterior.

Run with ``python demos/selectors_vs_sampler.py``.
"""
import numpy as np

from sepinv import PosteriorEvaluator, SamplerConfig, parallel_chain_run
from sepinv.selectors import (FIXED_ALPHAS, OptimizerConfig, cls_fixed_alpha_fit,
                              minimize_selector, ml_score)
from sepinv.toy import toy_scalar_problem

# the one-parameter smoothing problem with 5% noise
prob, prior, truth = toy_scalar_problem(noise=0.05, seed=4)
print("true m:", truth["m"])

opt = OptimizerConfig(n_starts=8, max_evals=1600, seed=0)
gcv = minimize_selector(prob, "GCV", prior, opt)
ml = minimize_selector(prob, "ML", prior, opt)
for r in (gcv, ml):
    print(f"{r.criterion:>4}: m = {np.round(r.m, 4)}, log10 alpha = {np.log10(r.alpha):.3f}, "
          f"{r.evaluations} evaluations")

# minimizing the ML ratio is the same as maximizing log R
ev = PosteriorEvaluator(prob, prior)
m0, a0 = ml.m, ml.alpha
print("log R at the ML point:", round(ev.evaluate(m0, a0).log_value, 6),
      " -n/2 log(ML):", round(-0.5 * prob.n * np.log(ml_score(prob, m0, a0)), 6))

# fixed alphas: each gives a different m, and nothing says which to trust
for fit in cls_fixed_alpha_fit(prob, FIXED_ALPHAS, prior, opt):
    print(f" CLS alpha={fit.alpha:g}: m = {np.round(fit.m, 4)}, misfit {fit.value:.4g}")

# the posterior gives a mean and a spread instead of a single point
state = parallel_chain_run(ev, prior, SamplerConfig(n_steps=4000, n_parallel=8, seed=2))
kept = state.retained(0.2)
mean, std = kept.mean(axis=0), kept.std(axis=0, ddof=1)
print("posterior mean:", np.round(mean, 4))
print("posterior std: ", np.round(std, 4))
for name, m in (("GCV", gcv.m), ("ML", ml.m), ("posterior mean", mean[:-1])):
    print(f"{name:>15}: |m - m_true| = {np.linalg.norm(m - truth['m']):.4f}")
