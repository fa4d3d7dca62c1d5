"""Sampling the (m, log10 alpha) posterior of a one-parameter smoothing problem.

Run with ``python demos/toy_posterior.py``. Takes about a minute.
"""
import numpy as np
from scipy.integrate import trapezoid

from sepinv import PosteriorEvaluator, SamplerConfig, parallel_chain_run, posterior_grid
from sepinv.toy import toy_scalar_problem

# 20 receivers see a smooth source through a kernel whose width is set by m
prob, prior, truth = toy_scalar_problem(n=20, p=50, m_true=0.3, noise=0.02)
print("n x p =", prob.n, "x", prob.p, " true m =", truth["m"][0])

# log R(m, alpha) is cheap here, so a brute-force grid gives reference marginals
ev = PosteriorEvaluator(prob, prior)
m_axis = np.linspace(prior.lower[0], prior.upper[0], 201)
a_axis = np.linspace(prior.lower[1], prior.upper[1], 101)
grid = posterior_grid(ev, m_axis, a_axis)
m_dens, a_dens = grid.marginals()
i, j = np.unravel_index(np.argmax(grid.table), grid.table.shape)
print(f"grid mode: m = {m_axis[i]:.4f}, log10 alpha = {a_axis[j]:.2f}")
print(f"grid mean: m = {trapezoid(m_axis * m_dens, m_axis):.4f}, "
      f"log10 alpha = {trapezoid(a_axis * a_dens, a_axis):.3f}")

# 8 proposals per step, mixed through the finite-state transition matrix
state = parallel_chain_run(ev, prior, SamplerConfig(n_steps=12_500, n_parallel=8, seed=1))
kept = state.retained(0.2)
print(f"acceptance {state.acceptance_rate:.3f}, {kept.shape[0]} retained samples")
print("chain mean:", np.round(kept.mean(axis=0), 4))

# side-by-side marginal of m as a coarse text histogram
edges = np.linspace(m_axis[0], m_axis[-1], 26)
hist, _ = np.histogram(kept[:, 0], bins=edges, density=True)
ref = np.interp(0.5 * (edges[1:] + edges[:-1]), m_axis, m_dens)
width = 40 / max(hist.max(), ref.max())
for lo, h, r in zip(edges[:-1], hist, ref):
    print(f"{lo:6.3f} {'#' * round(h * width):<41s} {h:6.2f}  ref {r:6.2f}")

try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:
    plt = None
if plt is not None:
    fig, ax = plt.subplots(1, 2, figsize=(9, 3.5))
    ax[0].hist(kept[:, 0], bins=60, density=True, alpha=0.5)
    ax[0].plot(m_axis, m_dens, "k")
    ax[0].set_xlabel("m")
    ax[1].hist(kept[:, 1], bins=60, density=True, alpha=0.5)
    ax[1].plot(a_axis, a_dens, "k")
    ax[1].set_xlabel("log10 alpha")
    fig.tight_layout()
    fig.savefig("toy_marginals.png", dpi=120)
    print("wrote toy_marginals.png")
