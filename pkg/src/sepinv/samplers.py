"""
Adaptive Metropolis samplers over theta = (m, log10 alpha).

Two drivers share the same proposal and adaptation machinery:

* :func:`single_chain_run`, the classic propose/accept/reject loop with a
  covariance refresh every ``cov_update_every`` steps;
* :func:`parallel_chain_run`, which draws ``n_parallel`` proposals per step,
  evaluates them concurrently and mixes them with the current state through
  the finite-state transition matrix of :func:`build_transition_matrix`.

Targets are plain callables ``theta -> log density`` returning ``-inf`` off
the support, so a :class:`~sepinv.posterior.PosteriorEvaluator` and synthetic
test densities plug in the same way.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, FactorizationFailure, InvalidWeights, SamplerAborted

logger = logging.getLogger(__name__)

COV_RIDGE = 1e-10
ANCHOR_MODES = ("per_slot", "last_column", "auxiliary")
INDEX_MODES = ("chain", "row")


def default_beta(j: int) -> float:
    return min(0.9, 5.0 / math.sqrt(j))


@dataclass
class SamplerConfig:
    """Settings for both drivers.

    ``anchor_mode`` picks the centre of each parallel proposal: the slot's own
    previous column (``per_slot``), the last column (``last_column``), or an
    auxiliary point drawn around the last column from which all proposals are
    drawn iid (``auxiliary``). ``index_mode`` picks how the new columns are
    read off the transition matrix: ``chain`` walks the finite-state chain
    starting at the current state, ``row`` draws column k-1 from row k.
    """

    n_steps: int = 50_000
    cov_update_every: int = 100
    n_parallel: int = 1
    beta_schedule: Callable[[int], float] = default_beta
    scale: Optional[float] = None
    seed: int = 0
    burn_in_draws: int = 500
    anchor_mode: str = "auxiliary"
    index_mode: str = "chain"
    workers: int = 1
    incident_limit: float = 0.01
    diagnostics: Optional[Callable[[dict], None]] = None

    def validate(self):
        if not 1 < self.cov_update_every < self.n_steps:
            raise ConfigError(
                f"need 1 < cov_update_every < n_steps, got {self.cov_update_every}, {self.n_steps}")
        if self.n_parallel < 1:
            raise ConfigError("n_parallel must be >= 1")
        if self.burn_in_draws < 1:
            raise ConfigError("burn_in_draws must be >= 1")
        if self.anchor_mode not in ANCHOR_MODES:
            raise ConfigError(f"anchor_mode must be one of {ANCHOR_MODES}")
        if self.index_mode not in INDEX_MODES:
            raise ConfigError(f"index_mode must be one of {INDEX_MODES}")
        if self.scale is not None and not self.scale > 0:
            raise ConfigError("scale must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        return self

    def proposal_scale(self, dim: int) -> float:
        return self.scale if self.scale is not None else 2.38**2 / dim


@dataclass
class ChainState:
    """Full history of a run.

    ``chain`` has shape (n_steps, n_parallel, dim); row j holds the columns of
    the state matrix after step j+1. ``log_density`` and ``accepted`` follow
    the same layout.
    """

    chain: np.ndarray
    log_density: np.ndarray
    accepted: np.ndarray
    adapted_cov: np.ndarray
    cov0: np.ndarray
    step: int
    incidents: int = 0
    evaluations: int = 0

    @property
    def current(self) -> np.ndarray:
        return self.chain[self.step - 1]

    @property
    def samples(self) -> np.ndarray:
        """All stored points flattened to (n_steps * n_parallel, dim), step-major."""
        return self.chain[: self.step].reshape(-1, self.chain.shape[-1])

    @property
    def acceptance_rate(self) -> float:
        acc = self.accepted[1: self.step]
        return float(acc.mean()) if acc.size else float("nan")

    def retained(self, burn_in_fraction: float = 0.0) -> np.ndarray:
        start = int(round(burn_in_fraction * self.step))
        return self.chain[start: self.step].reshape(-1, self.chain.shape[-1])


@dataclass
class TransitionMatrix:
    entries: np.ndarray

    @property
    def size(self) -> int:
        return self.entries.shape[0]


def build_transition_matrix(log_weights) -> TransitionMatrix:
    """Multi-proposal transition matrix from log weights.

    ``log_weights[0]`` belongs to the current state, the rest to the
    proposals. Off-diagonal entries are min(1, w_l / w_k) / N_par, the
    diagonal takes the remaining mass. A zero-weight target is never entered;
    a zero-weight row moves to every positive-weight state with 1 / N_par.
    """
    lw = np.asarray(log_weights, dtype=float)
    if lw.ndim != 1 or lw.size < 2:
        raise InvalidWeights("need the current weight and at least one proposal weight")
    if not (lw < np.inf).all():  # catches NaN as well
        raise InvalidWeights("weights must not be NaN or infinite")
    if lw[0] == -np.inf:
        raise InvalidWeights("current state has zero weight")
    k = lw.size
    positive = lw > -np.inf
    if positive.all():
        t = np.exp(np.minimum(0.0, lw - lw[:, None]))
    else:
        finite = np.where(positive, lw, 0.0)
        t = np.exp(np.minimum(0.0, finite - finite[:, None]))
        t[~positive, :] = 1.0
        t[:, ~positive] = 0.0
    t /= k - 1
    t.flat[:: k + 1] = 0.0
    t.flat[:: k + 1] = 1.0 - t.sum(axis=1)
    return TransitionMatrix(t)


def update_covariance(history) -> np.ndarray:
    """Unbiased sample covariance of the rows of ``history`` plus a small ridge."""
    x = np.asarray(history, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least two samples as rows")
    c = np.cov(x, rowvar=False, ddof=1).reshape(x.shape[1], x.shape[1])
    c = 0.5 * (c + c.T)
    return c + COV_RIDGE * np.eye(x.shape[1])


class _RunningCovariance:
    """Shifted running sums so refreshes cost O(dim^2) regardless of history length."""

    def __init__(self, shift):
        self.shift = np.array(shift, dtype=float)
        d = self.shift.size
        self.count = 0
        self.s1 = np.zeros(d)
        self.s2 = np.zeros((d, d))

    def add(self, rows):
        y = np.atleast_2d(rows) - self.shift
        self.count += y.shape[0]
        self.s1 += y.sum(axis=0)
        self.s2 += y.T @ y

    def covariance(self):
        k = self.count
        mean = self.s1 / k
        c = (self.s2 - k * np.outer(mean, mean)) / (k - 1)
        c = 0.5 * (c + c.T)
        return c + COV_RIDGE * np.eye(c.shape[0])


def psd_factor(cov) -> np.ndarray:
    """F with F F' = cov; tolerates singular PSD input."""
    cov = np.asarray(cov, dtype=float)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(0.5 * (cov + cov.T))
        return v * np.sqrt(np.clip(w, 0.0, None))


def _step_noise(rng, factor, factor0, beta, scale):
    d = factor.shape[0]
    z = rng.standard_normal(2 * d)
    return math.sqrt(scale) * ((1.0 - beta) * (factor @ z[:d]) + beta * (factor0 @ z[d:]))


def propose(current, cov, cov0, beta, scale, rng: np.random.Generator) -> np.ndarray:
    """current + (1-beta) N(0, scale cov) + beta N(0, scale cov0), summed literally."""
    return np.asarray(current, dtype=float) + _step_noise(rng, psd_factor(cov), psd_factor(cov0),
                                                          beta, scale)


def initial_point(prior, config: SamplerConfig, rng: np.random.Generator):
    """Prior-mean start and prior covariance from ``burn_in_draws * n_parallel`` draws.

    If the mean falls outside a non-convex support, the draw nearest to it
    (in box-normalized distance) is used instead.
    """
    draws = prior.sample(rng, config.burn_in_draws * config.n_parallel)
    lo, hi = prior.lower, prior.upper
    mean = np.clip(draws.mean(axis=0), lo, hi)
    if draws.shape[0] > 1:
        # shifting first keeps constant coordinates at exactly zero variance
        cov0 = np.cov(draws - draws[0], rowvar=False, ddof=1).reshape(prior.dim, prior.dim)
        cov0 = 0.5 * (cov0 + cov0.T)
    else:
        cov0 = np.zeros((prior.dim, prior.dim))
    if not prior.contains(mean):
        width = np.where(hi > lo, hi - lo, 1.0)
        idx = np.argmin(np.sum(((draws - mean) / width) ** 2, axis=1))
        mean = draws[idx].copy()
    return mean, cov0


class _SafeTarget:
    def __init__(self, target, limit):
        self.target = target
        self.limit = limit
        self.incidents = 0
        self.evaluations = 0

    def __call__(self, theta):
        try:
            value = float(self.target(theta))
        except FactorizationFailure as exc:
            logger.info("factorization failure at %s: %s", theta, exc)
            self.incidents += 1
            value = -np.inf
        if np.isnan(value):
            value = -np.inf
        return value

    def check(self, evaluated):
        self.evaluations += evaluated
        if self.evaluations >= 100 and self.incidents >= self.limit * self.evaluations:
            raise SamplerAborted(
                f"{self.incidents} numerical incidents in {self.evaluations} evaluations")


def _streams(seed, n_slots):
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(n_slots + 3)
    gens = [np.random.Generator(np.random.Philox(c)) for c in children]
    # slots, then: start/prior draws, accept/T-row draws, auxiliary anchor
    return gens[:n_slots], gens[n_slots], gens[n_slots + 1], gens[n_slots + 2]


def _setup(target, prior, config, start, cov0, init_rng):
    config.validate()
    if start is None or cov0 is None:
        s, c = initial_point(prior, config, init_rng)
        start = s if start is None else start
        cov0 = c if cov0 is None else cov0
    start = np.asarray(start, dtype=float)
    cov0 = np.asarray(cov0, dtype=float)
    lstart = float(target(start))
    if not np.isfinite(lstart):
        raise ValueError(f"start point {start} has zero density")
    return start, cov0, lstart


def single_chain_run(target, prior, config: SamplerConfig, start=None, cov0=None) -> ChainState:
    """Adaptive random-walk Metropolis with one chain."""
    slot_rngs, init_rng, acc_rng, _ = _streams(config.seed, 1)
    rng = slot_rngs[0]
    start, cov0, lstart = _setup(target, prior, config, start, cov0, init_rng)
    dim = start.size
    n = config.n_steps
    scale = config.proposal_scale(dim)
    safe = _SafeTarget(target, config.incident_limit)

    chain = np.empty((n, 1, dim))
    logd = np.empty((n, 1))
    accepted = np.zeros((n, 1), dtype=bool)
    chain[0, 0] = start
    logd[0, 0] = lstart
    running = _RunningCovariance(start)
    running.add(start)

    cov = cov0.copy()
    factor, factor0 = psd_factor(cov), psd_factor(cov0)
    x, lx = start.copy(), lstart
    n_acc = 0
    for j in range(2, n + 1):
        if j % config.cov_update_every == 0:
            cov = running.covariance()
            factor = psd_factor(cov)
        beta = config.beta_schedule(j)
        cand = x + _step_noise(rng, factor, factor0, beta, scale)
        lc = safe(cand)
        safe.check(1)
        if np.log(acc_rng.random()) < lc - lx:
            x, lx = cand, lc
            accepted[j - 1, 0] = True
            n_acc += 1
        chain[j - 1, 0] = x
        logd[j - 1, 0] = lx
        running.add(x)
        if config.diagnostics is not None:
            config.diagnostics({"step": j, "slot": 1, "accepted": bool(accepted[j - 1, 0]),
                                "log_density": lx, "acceptance_rate": n_acc / (j - 1)})
    return ChainState(chain, logd, accepted, cov, cov0, n, safe.incidents, safe.evaluations)


def _categorical(rng, probs):
    c = np.cumsum(probs)
    return min(int(np.searchsorted(c, rng.random() * c[-1], side="right")), probs.size - 1)


def parallel_chain_run(target, prior, config: SamplerConfig, start=None, cov0=None) -> ChainState:
    """Multi-proposal sampler: N_par proposals per step, mixed through T."""
    n_par = config.n_parallel
    slot_rngs, init_rng, acc_rng, aux_rng = _streams(config.seed, n_par)
    start, cov0, lstart = _setup(target, prior, config, start, cov0, init_rng)
    dim = start.size
    n = config.n_steps
    scale = config.proposal_scale(dim)
    safe = _SafeTarget(target, config.incident_limit)

    chain = np.empty((n, n_par, dim))
    logd = np.empty((n, n_par))
    accepted = np.zeros((n, n_par), dtype=bool)
    chain[0] = start
    logd[0] = lstart
    running = _RunningCovariance(start)
    running.add(chain[0])

    cov = cov0.copy()
    factor, factor0 = psd_factor(cov), psd_factor(cov0)
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    n_acc = 0
    try:
        for j in range(2, n + 1):
            if j % config.cov_update_every == 0:
                cov = running.covariance()
                factor = psd_factor(cov)
            beta = config.beta_schedule(j)
            prev = chain[j - 2]
            current, lcurrent = prev[-1], logd[j - 2, -1]

            props = np.empty((n_par, dim))
            if config.anchor_mode == "auxiliary":
                half = math.sqrt(0.5)
                centre = current + half * _step_noise(aux_rng, factor, factor0, beta, scale)
                for k in range(n_par):
                    props[k] = centre + half * _step_noise(slot_rngs[k], factor, factor0, beta, scale)
            else:
                for k in range(n_par):
                    anchor = prev[k] if config.anchor_mode == "per_slot" else current
                    props[k] = anchor + _step_noise(slot_rngs[k], factor, factor0, beta, scale)

            if pool is None:
                lprops = [safe(x) for x in props]
            else:
                lprops = list(pool.map(safe, props))
            safe.check(n_par)

            t = build_transition_matrix(np.concatenate(([lcurrent], lprops))).entries
            idx = 0
            for k in range(1, n_par + 1):
                row = idx if config.index_mode == "chain" else k
                pick = _categorical(acc_rng, t[row])
                if config.index_mode == "row" and pick > 0 and lprops[pick - 1] == -np.inf:
                    pick = 0
                idx = pick
                if pick == 0:
                    chain[j - 1, k - 1] = current
                    logd[j - 1, k - 1] = lcurrent
                else:
                    chain[j - 1, k - 1] = props[pick - 1]
                    logd[j - 1, k - 1] = lprops[pick - 1]
                    accepted[j - 1, k - 1] = True
                    n_acc += 1
            running.add(chain[j - 1])
            if config.diagnostics is not None:
                rate = n_acc / ((j - 1) * n_par)
                for k in range(n_par):
                    config.diagnostics({"step": j, "slot": k + 1,
                                        "accepted": bool(accepted[j - 1, k]),
                                        "log_density": float(logd[j - 1, k]),
                                        "acceptance_rate": rate})
    finally:
        if pool is not None:
            pool.shutdown()
    return ChainState(chain, logd, accepted, cov, cov0, n, safe.incidents, safe.evaluations)
