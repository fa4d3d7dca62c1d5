"""
Experiment runner: config parsing, problem assembly, sampling and reporting.

Configs are flat ``key = value`` text with dotted keys, for example::

    problem = fault
    scenario.label = high
    sampler.n_steps = 4000
    sampler.n_parallel = 20

Every key maps onto a field of :class:`ExperimentConfig` or one of its
sections; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy

from . import __version__
from .errors import BudgetExhausted, ConfigError, SepinvError
from .faultsim import (FAVORABLE_ALPHA, FAVORABLE_M, FaultSetup, NoiseScenario, export_lattice_csv,
                       fault_problem, geometry_from_m, lattice)
from .linalg import solve_regularized
from .posterior import PosteriorEvaluator, PriorSpec, ProblemDefinition, posterior_grid
from .samplers import ChainState, SamplerConfig, parallel_chain_run, single_chain_run
from .selectors import FIXED_ALPHAS, OptimizerConfig, cls_fixed_alpha_fit, minimize_selector
from .toy import dense_random_problem, toy_scalar_problem

logger = logging.getLogger(__name__)

PROBLEMS = ("fault", "toy_scalar", "dense_random")
FULL_SCALE = {"grid_m": 101, "n_stations": 195}


@dataclass
class ScenarioSection:
    label: str = "low"
    fraction: float = -1.0  # negative: use the label's default fraction
    seed: int = 0

    def scenario(self) -> NoiseScenario:
        if self.label not in ("low", "high"):
            raise ConfigError(f"scenario.label must be 'low' or 'high', got {self.label!r}")
        base = NoiseScenario.low(self.seed) if self.label == "low" else NoiseScenario.high(self.seed)
        if self.fraction >= 0:
            return NoiseScenario(self.label, self.fraction, self.seed)
        return base


@dataclass
class SamplerSection:
    n_steps: int = 50_000
    cov_update_every: int = 100
    n_parallel: int = 20
    seed: int = 0
    burn_in_draws: int = 500
    beta_constant: float = 5.0  # beta_j = min(0.9, beta_constant / sqrt(j))
    anchor_mode: str = "auxiliary"
    index_mode: str = "chain"
    workers: int = 1

    def build(self) -> SamplerConfig:
        if not self.beta_constant > 0:
            raise ConfigError("sampler.beta_constant must be positive")
        c = float(self.beta_constant)
        cfg = SamplerConfig(n_steps=self.n_steps, cov_update_every=self.cov_update_every,
                            n_parallel=self.n_parallel, seed=self.seed,
                            burn_in_draws=self.burn_in_draws,
                            beta_schedule=lambda j: min(0.9, c / np.sqrt(j)),
                            anchor_mode=self.anchor_mode, index_mode=self.index_mode,
                            workers=self.workers)
        return cfg.validate()


@dataclass
class SelectorSection:
    gcv: bool = True
    ml: bool = True
    cls: bool = True
    favorable: bool = True
    n_starts: int = 30
    max_evals: int = 3000
    local_tol: float = 1e-4
    seed: int = 0
    strict_budget: bool = False
    with_sampler: bool = True  # compare: also run the sampler for the posterior-mean row

    def build(self) -> OptimizerConfig:
        return OptimizerConfig(self.n_starts, self.max_evals, self.local_tol, self.seed).validate()


@dataclass
class FaultSection:
    grid_m: int = 41
    n_stations: int = 65
    min_depth: float = 0.0
    full_scale: bool = False

    def sizes(self):
        if self.full_scale:
            return FULL_SCALE["grid_m"], FULL_SCALE["n_stations"]
        return self.grid_m, self.n_stations


@dataclass
class ToySection:
    n: int = 20
    p: int = 50
    q: int = 2  # dense_random only
    m_true: float = 0.3
    noise: float = 0.02
    seed: int = 0


@dataclass
class ReportSection:
    burn_in_fraction: float = 0.2
    bins: int = 60
    oracle_m_points: int = 201
    oracle_alpha_points: int = 101


@dataclass
class ExperimentConfig:
    problem: str = "fault"
    output_dir: str = "runs/out"
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    selectors: SelectorSection = field(default_factory=SelectorSection)
    fault: FaultSection = field(default_factory=FaultSection)
    toy: ToySection = field(default_factory=ToySection)
    report: ReportSection = field(default_factory=ReportSection)

    def validate(self):
        if self.problem not in PROBLEMS:
            raise ConfigError(f"problem must be one of {PROBLEMS}, got {self.problem!r}")
        if not 0 <= self.report.burn_in_fraction < 1:
            raise ConfigError("report.burn_in_fraction must lie in [0, 1)")
        if self.report.bins < 1:
            raise ConfigError("report.bins must be >= 1")
        self.scenario.scenario()
        self.sampler.build()
        self.selectors.build()
        return self

    # flat text round trip

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            cfg.set(key, value)
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)

    def set(self, key: str, value):
        parts = key.split(".")
        target = self
        for part in parts[:-1]:
            sub = getattr(target, part, None)
            if sub is None or not dataclasses.is_dataclass(sub):
                raise ConfigError(f"unknown config key {key!r}")
            target = sub
        name = parts[-1]
        types = {f.name: f.type for f in dataclasses.fields(target)}
        if name not in types or dataclasses.is_dataclass(getattr(target, name)):
            raise ConfigError(f"unknown config key {key!r}")
        setattr(target, name, _coerce(key, value, types[name]))

    def items(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                for g in dataclasses.fields(v):
                    yield f"{f.name}.{g.name}", getattr(v, g.name)
            else:
                yield f.name, v

    def to_text(self) -> str:
        lines = []
        for key, v in self.items():
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"


def _coerce(key, value, typ):
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    if not isinstance(value, str):
        return value
    value = value.strip().strip("'\"")
    try:
        if typ == "bool":
            low = value.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(value)
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot read {value!r} as {typ}") from exc
    return value


# problem assembly

@dataclass
class BuiltProblem:
    problem: ProblemDefinition
    prior: PriorSpec
    m_true: Optional[np.ndarray]
    setup: Optional[FaultSetup] = None
    extra: dict = field(default_factory=dict)


def build_problem(config: ExperimentConfig) -> BuiltProblem:
    if config.problem == "fault":
        grid_m, n_st = config.fault.sizes()
        setup = fault_problem(config.scenario.scenario(), grid_m=grid_m, n_stations=n_st,
                              min_depth=config.fault.min_depth)
        return BuiltProblem(setup.problem, setup.prior, setup.m_true, setup,
                            {"relative_error": setup.relative_error})
    t = config.toy
    if config.problem == "toy_scalar":
        prob, prior, truth = toy_scalar_problem(t.n, t.p, t.m_true, t.noise, t.seed)
    else:
        prob, prior, truth = dense_random_problem(t.n, t.p, t.q, t.seed, t.noise)
    return BuiltProblem(prob, prior, truth["m"])


# summaries

@dataclass
class DepthStatistics:
    mean: np.ndarray
    std: np.ndarray
    abs_error: Optional[np.ndarray]


def depth_statistics(chain, grid_m: int, m_true=None) -> DepthStatistics:
    """Pointwise mean, population std and |mean - truth| of the depth over the lattice.

    ``chain`` holds one sample per row; the first six columns are m.
    """
    chain = np.atleast_2d(np.asarray(chain, dtype=float))
    if chain.shape[0] == 0:
        raise ValueError("empty chain")
    x1, x2 = lattice(grid_m)
    s1 = np.zeros(x1.size)
    s2 = np.zeros(x1.size)
    ref = geometry_from_m(chain[0, :6]).depth_fn(x1, x2)
    for row in chain:
        d = geometry_from_m(row[:6]).depth_fn(x1, x2) - ref
        s1 += d
        s2 += d * d
    k = chain.shape[0]
    mean_shift = s1 / k
    var = np.maximum(s2 / k - mean_shift**2, 0.0)
    mean = ref + mean_shift
    err = None
    if m_true is not None:
        err = np.abs(mean - geometry_from_m(m_true).depth_fn(x1, x2))
    return DepthStatistics(mean, np.sqrt(var), err)


def reconstruct_slip(prob: ProblemDefinition, m, alpha) -> np.ndarray:
    """g_min at (m, alpha), reshaped to the square lattice when p is a square."""
    g = solve_regularized(prob.operator(m), prob.gram, alpha, prob.data_u) \
        if np.any(prob.data_u) else np.zeros(prob.p)
    k = int(round(np.sqrt(prob.p)))
    return g.reshape(k, k) if k * k == prob.p else g


def marginal_histograms(samples, bins: int, lower=None, upper=None) -> list[dict]:
    """Per-coordinate histograms normalized to unit integral."""
    out = []
    for i in range(samples.shape[1]):
        col = samples[:, i]
        lo = col.min() if lower is None else lower[i]
        hi = col.max() if upper is None else upper[i]
        if not hi > lo:
            lo, hi = lo - 0.5, hi + 0.5
        dens, edges = np.histogram(col, bins=bins, range=(lo, hi), density=True)
        out.append({"edges": edges.tolist(), "density": dens.tolist()})
    return out


@dataclass
class RunSummary:
    problem: str
    posterior_mean: np.ndarray
    posterior_cov: np.ndarray
    posterior_std: np.ndarray
    marginal_histograms: list
    acceptance_rate: float
    retained_samples: int
    runtime_seconds: float
    seeds: dict
    versions: dict
    m_true: Optional[np.ndarray] = None
    relative_error: Optional[float] = None
    incidents: int = 0
    clamp_count: int = 0
    depth: Optional[DepthStatistics] = None
    slip: Optional[np.ndarray] = None
    selector_results: list = field(default_factory=list)
    chain: Optional[ChainState] = field(default=None, repr=False)

    @property
    def q(self) -> int:
        return self.posterior_mean.size - 1

    @property
    def mean_m(self) -> np.ndarray:
        return self.posterior_mean[:-1]

    @property
    def mean_log10_alpha(self) -> float:
        return float(self.posterior_mean[-1])

    def to_json(self) -> dict:
        out = {
            "problem": self.problem,
            "posterior_mean": self.posterior_mean.tolist(),
            "posterior_cov": self.posterior_cov.tolist(),
            "posterior_std": self.posterior_std.tolist(),
            "marginal_histograms": self.marginal_histograms,
            "acceptance_rate": self.acceptance_rate,
            "retained_samples": self.retained_samples,
            "runtime_seconds": self.runtime_seconds,
            "seeds": self.seeds,
            "versions": self.versions,
            "incidents": self.incidents,
            "clamp_count": self.clamp_count,
            "selector_results": self.selector_results,
        }
        if self.m_true is not None:
            out["m_true"] = self.m_true.tolist()
        if self.relative_error is not None:
            out["relative_error"] = self.relative_error
        return out


def versions() -> dict:
    return {"sepinv": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def run_sampler(built: BuiltProblem, sampler_cfg: SamplerConfig):
    evaluator = PosteriorEvaluator(built.problem, built.prior)
    if sampler_cfg.n_parallel == 1:
        state = single_chain_run(evaluator, built.prior, sampler_cfg)
    else:
        state = parallel_chain_run(evaluator, built.prior, sampler_cfg)
    return state, evaluator


def summarize(config: ExperimentConfig, built: BuiltProblem, state: ChainState, evaluator,
              runtime: float, with_fields: bool = True) -> RunSummary:
    rep = config.report
    kept = state.retained(rep.burn_in_fraction)
    mean = kept.mean(axis=0)
    cov = np.cov(kept, rowvar=False, ddof=1).reshape(kept.shape[1], kept.shape[1])
    cov = 0.5 * (cov + cov.T)
    lower, upper = built.prior.lower, built.prior.upper
    hist = marginal_histograms(kept, rep.bins)
    summary = RunSummary(
        problem=config.problem, posterior_mean=mean, posterior_cov=cov,
        posterior_std=np.sqrt(np.diag(cov)), marginal_histograms=hist,
        acceptance_rate=state.acceptance_rate, retained_samples=kept.shape[0],
        runtime_seconds=runtime,
        seeds={"sampler": config.sampler.seed, "scenario": config.scenario.seed,
               "toy": config.toy.seed, "selectors": config.selectors.seed},
        versions=versions(), m_true=built.m_true,
        relative_error=built.extra.get("relative_error"), incidents=state.incidents,
        clamp_count=evaluator.clamp_count, chain=state)
    if with_fields and config.problem == "fault":
        grid_m = config.fault.sizes()[0]
        summary.depth = depth_statistics(kept[:, :-1], grid_m, built.m_true)
        m_bar = np.clip(mean[:-1], lower[:-1], upper[:-1])
        summary.slip = reconstruct_slip(built.problem, m_bar, 10.0 ** mean[-1])
    return summary


# artifacts

def chain_csv_lines(state: ChainState):
    q = state.chain.shape[-1] - 1
    header = ["step", "slot"] + [f"m{i + 1}" for i in range(q)] + ["log10_alpha", "log_density",
                                                                   "accepted"]
    yield ",".join(header)
    for j in range(state.step):
        for k in range(state.chain.shape[1]):
            vals = ",".join(repr(float(v)) for v in state.chain[j, k])
            yield (f"{j + 1},{k + 1},{vals},{float(state.log_density[j, k])!r},"
                   f"{int(state.accepted[j, k])}")


def write_chain_csv(path, state: ChainState):
    with open(path, "w") as fh:
        for line in chain_csv_lines(state):
            fh.write(line + "\n")


def read_chain_csv(path):
    """(header, data) of a chain file; data is a float array."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


class RunDirectory:
    """Collects artifacts and writes the manifest, also on failure."""

    def __init__(self, root, config: ExperimentConfig, verb: str):
        self.root = Path(root)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {root}: {exc}") from exc
        self.config = config
        self.verb = verb
        self.files: list[str] = []
        self.write_text("config.txt", config.to_text())

    def path(self, name) -> Path:
        self.files.append(name)
        return self.root / name

    def write_text(self, name, text):
        self.path(name).write_text(text)

    def write_json(self, name, obj):
        self.write_text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def finish(self, status: str, error: Optional[BaseException] = None, extra=None):
        manifest = {"verb": self.verb, "status": status, "files": list(self.files),
                    "config_file": "config.txt", "versions": versions()}
        if error is not None:
            manifest["error"] = f"{type(error).__name__}: {error}"
        if extra:
            manifest.update(extra)
        (self.root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True)
                                                 + "\n")


def write_run_artifacts(out: RunDirectory, summary: RunSummary, config: ExperimentConfig):
    write_chain_csv(out.path("chain.csv"), summary.chain)
    out.write_json("summary.json", summary.to_json())
    if summary.depth is not None:
        grid_m = config.fault.sizes()[0]
        cols = {"mean_depth": summary.depth.mean, "std_depth": summary.depth.std}
        if summary.depth.abs_error is not None:
            cols["abs_error"] = summary.depth.abs_error
        export_lattice_csv(out.path("depth.csv"), grid_m, cols)
    if summary.slip is not None and summary.slip.ndim == 2:
        export_lattice_csv(out.path("slip.csv"), summary.slip.shape[0],
                           {"slip": summary.slip.ravel()})


def run_experiment(config: ExperimentConfig, out_dir=None, write: bool = True) -> RunSummary:
    """Sample the posterior of the configured problem and write the run artifacts.

    On failure the manifest records the error and the files written so far,
    and the error propagates.
    """
    config.validate()
    out = RunDirectory(out_dir or config.output_dir, config, "run") if write else None
    try:
        built = build_problem(config)
        sampler_cfg = config.sampler.build()
        t0 = time.perf_counter()
        state, evaluator = run_sampler(built, sampler_cfg)
        summary = summarize(config, built, state, evaluator, time.perf_counter() - t0)
        if out is not None:
            write_run_artifacts(out, summary, config)
    except (SepinvError, ValueError, OSError) as exc:
        if out is not None:
            out.finish("failed", exc)
        raise
    if out is not None:
        out.finish("ok")
    return summary


# baselines

def compare_baselines(config: ExperimentConfig, summary: Optional[RunSummary] = None,
                      built: Optional[BuiltProblem] = None) -> list[dict]:
    """GCV and ML from free and favorable starts, and CLS at fixed alphas.

    Each row holds the method, its (m, alpha), the distance to the true m and,
    when a sampler summary is given, whether each coordinate lies within one
    posterior standard deviation of the posterior mean. Failures are recorded
    in the row instead of raised.
    """
    config.validate()
    sel = config.selectors
    built = built or build_problem(config)
    opt = sel.build()
    prob, prior, m_true = built.problem, built.prior, built.m_true
    rows = []

    def add(method, m, alpha, extra):
        m = np.asarray(m, dtype=float)
        row = {"method": method, "m": m.tolist(), "alpha": float(alpha),
               "log10_alpha": float(np.log10(alpha))}
        if m_true is not None:
            row["distance"] = float(np.linalg.norm(m - m_true))
        if summary is not None:
            row["within_1std"] = (np.abs(m - summary.mean_m)
                                  <= summary.posterior_std[:-1]).tolist()
        row.update(extra)
        rows.append(row)

    if summary is not None:
        add("posterior_mean", summary.mean_m, 10.0 ** summary.mean_log10_alpha, {})

    favorable = None
    if config.problem == "fault" and sel.favorable:
        favorable = np.append(FAVORABLE_M, np.log10(FAVORABLE_ALPHA))
    for name, flag in (("GCV", sel.gcv), ("ML", sel.ml)):
        if not flag:
            continue
        starts = [("free", ())]
        if favorable is not None:
            starts.append(("favorable", (favorable,)))
        for tag, injected in starts:
            method = f"{name}_{tag}"
            try:
                n_starts = 1 if tag == "favorable" else opt.n_starts
                cfg = dataclasses.replace(opt, n_starts=n_starts,
                                          max_evals=max(opt.max_evals, n_starts))
                res = minimize_selector(prob, name, prior, cfg, injected=injected,
                                        raise_on_budget=sel.strict_budget)
                add(method, res.m, res.alpha, {"score": res.score, "evaluations": res.evaluations,
                                               "budget_exhausted": res.budget_exhausted})
            except BudgetExhausted:
                raise
            except SepinvError as exc:
                rows.append({"method": method, "error": f"{type(exc).__name__}: {exc}"})
    if sel.cls:
        injected_m = (FAVORABLE_M,) if favorable is not None else ()
        try:
            fits = cls_fixed_alpha_fit(prob, FIXED_ALPHAS, prior, opt, injected_m=injected_m,
                                       raise_on_budget=sel.strict_budget)
            for fit in fits:
                add(f"CLS_alpha={fit.alpha:g}", fit.m, fit.alpha,
                    {"misfit": fit.value, "evaluations": fit.evaluations,
                     "budget_exhausted": fit.budget_exhausted})
        except BudgetExhausted:
            raise
        except SepinvError as exc:
            rows.append({"method": "CLS", "error": f"{type(exc).__name__}: {exc}"})
    return rows


def run_oracle(config: ExperimentConfig):
    """Brute-force posterior table: a full grid for scalar m, else an alpha profile at the true m."""
    config.validate()
    built = build_problem(config)
    ev = PosteriorEvaluator(built.problem, built.prior)
    rep = config.report
    lo, hi = built.prior.lower, built.prior.upper
    a_axis = np.linspace(lo[-1], hi[-1], rep.oracle_alpha_points)
    if built.prior.q == 1:
        m_axis = np.linspace(lo[0], hi[0], rep.oracle_m_points)
        return posterior_grid(ev, m_axis, a_axis)
    if built.m_true is None:
        raise ConfigError("the alpha profile needs a known true m")
    return posterior_grid(ev, built.m_true[None, :], a_axis)
