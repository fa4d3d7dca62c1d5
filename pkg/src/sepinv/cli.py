"""Command line entry point: ``sepinv {run,oracle,compare,validate}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import BudgetExhausted, ConfigError, SepinvError
from .experiment import (ExperimentConfig, RunDirectory, build_problem, compare_baselines,
                         run_experiment, run_oracle)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_BUDGET = 4

logger = logging.getLogger("sepinv")


def _parser():
    p = argparse.ArgumentParser(prog="sepinv", description=__doc__)
    p.add_argument("verb", choices=["run", "oracle", "compare", "validate"])
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="master seed for the sampler and the optimizer")
    p.add_argument("--out", help="output directory")
    p.add_argument("--n-par", type=int, dest="n_par", help="proposals per step")
    p.add_argument("--steps", type=int, help="number of sampler steps")
    p.add_argument("--full-scale", action="store_true", dest="full_scale",
                   help="use the 101 x 101 lattice with 195 stations")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg.sampler.seed = args.seed
        cfg.selectors.seed = args.seed
    if args.out is not None:
        cfg.output_dir = args.out
    if args.n_par is not None:
        cfg.sampler.n_parallel = args.n_par
    if args.steps is not None:
        cfg.sampler.n_steps = args.steps
    if args.full_scale:
        cfg.fault.full_scale = True
    return cfg.validate()


def _cmd_run(cfg):
    summary = run_experiment(cfg)
    print(f"acceptance rate {summary.acceptance_rate:.3f}, "
          f"{summary.retained_samples} retained samples, {summary.runtime_seconds:.1f} s")
    print("posterior mean:", np.array2string(summary.posterior_mean, precision=4))
    print("posterior std: ", np.array2string(summary.posterior_std, precision=4))
    print(f"artifacts in {cfg.output_dir}")


def _cmd_oracle(cfg):
    out = RunDirectory(cfg.output_dir, cfg, "oracle")
    try:
        grid = run_oracle(cfg)
        lines = ["m_index,log10_alpha," + ",".join(f"m{i + 1}" for i in range(grid.m_grid.shape[1]))
                 + ",log_density"]
        for i, m in enumerate(grid.m_grid):
            for j, a in enumerate(grid.log10_alpha_grid):
                ms = ",".join(repr(float(v)) for v in m)
                lines.append(f"{i},{float(a)!r},{ms},{float(grid.table[i, j])!r}")
        out.write_text("oracle_grid.csv", "\n".join(lines) + "\n")
        if grid.m_grid.shape[0] > 1:
            m_marg, a_marg = grid.marginals()
            out.write_json("oracle_marginals.json", {
                "m": grid.m_grid[:, 0].tolist(), "m_density": m_marg.tolist(),
                "log10_alpha": grid.log10_alpha_grid.tolist(), "log10_alpha_density":
                a_marg.tolist()})
        print(f"{grid.table.size} nodes, {len(grid.errors)} failures; artifacts in {cfg.output_dir}")
    except Exception as exc:
        out.finish("failed", exc)
        raise
    out.finish("ok")


def _cmd_compare(cfg):
    out = RunDirectory(cfg.output_dir, cfg, "compare")
    try:
        summary = None
        built = build_problem(cfg)
        if cfg.selectors.with_sampler:
            summary = run_experiment(cfg, out_dir=Path(cfg.output_dir) / "sampler")
        rows = compare_baselines(cfg, summary=summary, built=built)
        out.write_json("comparison.json", rows)
        for row in rows:
            if "error" in row:
                print(f"{row['method']:<22} failed: {row['error']}")
            else:
                dist = row.get("distance", float("nan"))
                print(f"{row['method']:<22} log10 alpha {row['log10_alpha']:8.3f}  "
                      f"|m - m_true| {dist:10.3f}")
    except Exception as exc:
        out.finish("failed", exc)
        raise
    out.finish("ok")


def _cmd_validate(cfg):
    from .validation import run_checks

    results = run_checks(seed=cfg.sampler.seed)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    if not all(ok for _, ok, _ in results):
        raise SepinvError("validation checks failed")


COMMANDS = {"run": _cmd_run, "oracle": _cmd_oracle, "compare": _cmd_compare,
            "validate": _cmd_validate}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        COMMANDS[args.verb](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BudgetExhausted as exc:
        best = exc.best
        record = best.record() if hasattr(best, "record") else best
        print(f"budget exhausted: {exc}; best so far {json.dumps(record)}", file=sys.stderr)
        return EXIT_BUDGET
    except (SepinvError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
