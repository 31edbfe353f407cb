"""Command line entry point: ``iclmpc run|validate|table|plotdata``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import estimator as est
from .geometry import GeometryError
from .harness import (ScenarioError, load_scenario, monte_carlo_validate, performance_loss,
                      plotdata_rows, read_run, rows_to_csv, table_rows, write_run)
from .icl import run
from .rmpc import MpcController
from .system import TaskError

MODES = {"prob": est.PROBABILISTIC, "robust": est.ROBUST}


class CliError(RuntimeError):
    def __init__(self, kind: str, message: str, **extra):
        super().__init__(message)
        self.kind = kind
        self.extra = extra


def _fail(exc: Exception, kind: str | None = None, **extra) -> int:
    payload = {"error": kind or type(exc).__name__, "message": str(exc)}
    payload.update(extra)
    print(json.dumps(payload), file=sys.stderr)
    return 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iclmpc", description="Robust MPC with iterative constraint learning")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the learning loop and write a run directory")
    r.add_argument("scenario", help="scenario JSON file or builtin name (sec5)")
    r.add_argument("--seed", type=int)
    r.add_argument("--mode", choices=sorted(MODES))
    r.add_argument("--epsilon", type=float)
    r.add_argument("--beta", type=float)
    r.add_argument("--out", help="run directory (default: scenario output_dir or runs/<name>_<mode>_<seed>)")
    r.add_argument("--max-iterations", type=int)
    r.add_argument("--dump-qp", action="store_true", help="write qp_<j>_<t>.json for every MPC solve")

    v = sub.add_parser("validate", help="Monte Carlo validation of a finished run")
    v.add_argument("run_dir")
    v.add_argument("--trials", type=int)
    v.add_argument("--seed", type=int)
    v.add_argument("--out", help="write the report JSON here instead of stdout")

    t = sub.add_parser("table", help="summary CSV (epsilon, j_bar, eps_hat, cost_ratio) over several run directories")
    t.add_argument("run_dirs", nargs="+")
    t.add_argument("--trials", type=int, default=100)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")

    d = sub.add_parser("plotdata", help="CSV of estimate vertices per iteration plus the true set")
    d.add_argument("run_dir")
    d.add_argument("--out")
    return p


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _cmd_run(a) -> int:
    sc = load_scenario(a.scenario)
    sc = sc.with_overrides(master_seed=a.seed, mode=MODES.get(a.mode), epsilon=a.epsilon, beta=a.beta,
                           max_iterations=a.max_iterations)
    if sc.mode == est.PROBABILISTIC and not (0 < sc.epsilon < 1 and 0 < sc.beta < 1):
        raise ScenarioError("epsilon and beta must lie in (0, 1)")
    mode_tag = "prob" if sc.mode == est.PROBABILISTIC else "robust"
    out = Path(a.out or sc.output_dir or f"runs/{sc.name}_{mode_tag}_{sc.master_seed}")
    out.mkdir(parents=True, exist_ok=True)
    cfg = sc.icl_config()
    ctl = MpcController(sc.task, cfg.qp, dump_dir=out if a.dump_qp else None)
    state, records = run(sc.task, sc.mode, cfg, sc.master_seed, ctl)
    source = {"name": sc.name, "mode": sc.mode, "epsilon": sc.epsilon, "beta": sc.beta,
              "svm": sc.svm.to_dict(), "warm_start_trajectories": sc.warm_start_trajectories,
              "monte_carlo_trials": sc.monte_carlo_trials, "master_seed": sc.master_seed,
              "max_iterations": sc.max_iterations, "disturbance_law": sc.disturbance_law}
    write_run(out, sc, state, records, source)
    summary = state.summary()
    summary["run_dir"] = str(out)
    print(json.dumps(summary))
    if state.status == "aborted":
        raise CliError("RunFailed", "MPC infeasible at x_S for every admissible estimate",
                       run_dir=str(out), iteration=state.failed_iteration)
    return 0


def _cmd_validate(a) -> int:
    r = read_run(a.run_dir)
    cfg = r["info"].get("scenario_config") or {}
    trials = a.trials if a.trials is not None else int(cfg.get("monte_carlo_trials", 100))
    seed = a.seed if a.seed is not None else int(r["info"].get("master_seed", 0))
    rep = monte_carlo_validate(r["task"], r["estimate"], r["terminal"], trials, seed)
    d = rep.to_dict()
    d["performance_loss"] = performance_loss(rep)
    d["certificate"] = r["certificate"].to_dict()
    d["seed"] = seed
    _emit(json.dumps(d, indent=1) + "\n", a.out)
    return 0


def _cmd_table(a) -> int:
    rows = table_rows(a.run_dirs, a.trials, a.seed)
    _emit(rows_to_csv(rows, ["epsilon", "j_bar", "eps_hat", "cost_ratio"]), a.out)
    return 0


def _cmd_plotdata(a) -> int:
    rows = plotdata_rows(a.run_dir)
    _emit(rows_to_csv(rows, ["set", "j", "vertex", "x1", "x2"]), a.out)
    return 0


def main(argv=None) -> int:
    parser = _parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return 0
        return _fail(ValueError("invalid command line arguments"), "UsageError")
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, stream=sys.stderr)
    handlers = {"run": _cmd_run, "validate": _cmd_validate, "table": _cmd_table, "plotdata": _cmd_plotdata}
    try:
        return handlers[a.command](a)
    except CliError as exc:
        return _fail(exc, exc.kind, **exc.extra)
    except (ScenarioError, TaskError) as exc:
        return _fail(exc, "ScenarioError")
    except (GeometryError, ValueError, OSError) as exc:
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
