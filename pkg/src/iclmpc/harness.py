"""Scenario files, Monte Carlo validation, performance loss and run-directory I/O."""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import estimator as est

from .geometry import Polytope, vertices
from .icl import IclConfig, RunState
from .rmpc import MpcController, lqr_gain, terminal_set
from .svm import SvmConfig
from .system import IterationRecord, LtiTask, TaskError, rng_stream, rollout, sample_disturbance, \
    write_trajectory_csv

SCHEMA_VERSION = 1
STREAM_VALIDATE = 3
BUILTIN = {"sec5": "sec5.json"}


class ScenarioError(ValueError):
    """Malformed or inconsistent scenario file."""


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    task: LtiTask
    mode: str = est.PROBABILISTIC
    epsilon: float = 0.3
    beta: float = 0.01
    svm: SvmConfig = field(default_factory=SvmConfig)
    warm_start_trajectories: int = 2
    monte_carlo_trials: int = 100
    master_seed: int = 0
    max_iterations: int = 200
    output_dir: Optional[str] = None
    disturbance_law: str = "uniform"

    @property
    def n_svm_samples(self) -> int:
        return self.svm.n_samples

    def icl_config(self) -> IclConfig:
        return IclConfig(mode=self.mode, epsilon=self.epsilon, beta=self.beta, svm=self.svm,
                         warm_start_trajectories=self.warm_start_trajectories,
                         max_iterations=self.max_iterations)

    def with_overrides(self, **kw) -> "Scenario":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw)


def _poly(d, name) -> Polytope:
    if "H" in d:
        return Polytope.from_dict(d)
    if "lower" in d and "upper" in d:
        return Polytope.from_box(d["lower"], d["upper"])
    raise ScenarioError(f"{name}: expected {{H, h}} or {{lower, upper}}")


def scenario_from_dict(d: dict) -> Scenario:
    try:
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ScenarioError(f"unsupported schema_version {version}")
        sysd = d["system"]
        cons = d["constraints"]
        A = np.array(sysd["A"], dtype=float)
        B = np.array(sysd["B"], dtype=float)
        cost = d["cost"]
        Q = np.array(cost["Q"], dtype=float)
        R = np.array(cost["R"], dtype=float)
        known = _poly(cons["known_state"], "known_state")
        unknown = cons.get("unknown_state")
        if unknown and len(unknown.get("h", [])):
            true = Polytope(np.vstack([known.H, np.array(unknown["H"], dtype=float)]),
                            np.concatenate([known.h, np.array(unknown["h"], dtype=float)]))
        else:
            true = known
        fb = d.get("feedback", {"type": "lqr"})
        if "K" in fb:
            K = np.array(fb["K"], dtype=float)
        else:
            K = lqr_gain(A, B, fb.get("Q", Q.tolist()), fb.get("R", R.tolist()))
        task = LtiTask(
            A=A, B=B, W=_poly(d["disturbance"]["set"], "disturbance.set"),
            Z_true_state=true, Z_known_state=known, U=_poly(cons["input"], "input"),
            x_S=d["x_S"], x_ref=d["x_ref"], T=d["T"], N=d["N"], Q_stage=Q, R_stage=R, K=K,
        )
        law = d["disturbance"].get("law", "uniform")
        if law != "uniform":
            raise ScenarioError(f"unsupported disturbance law {law!r}")
        icl_d = d.get("icl", {})
        mode = icl_d.get("mode", est.PROBABILISTIC)
        mode = {"prob": est.PROBABILISTIC, "robust": est.ROBUST}.get(mode, mode)
        if mode not in (est.PROBABILISTIC, est.ROBUST):
            raise ScenarioError(f"unknown mode {mode!r}")
        sc = Scenario(
            name=d.get("name", "scenario"),
            task=task,
            mode=mode,
            epsilon=float(icl_d.get("epsilon", 0.3)),
            beta=float(icl_d.get("beta", 0.01)),
            svm=SvmConfig.from_dict(d.get("svm", {})),
            warm_start_trajectories=int(icl_d.get("warm_start_trajectories", 2)),
            monte_carlo_trials=int(d.get("monte_carlo_trials", 100)),
            master_seed=int(d.get("master_seed", 0)),
            max_iterations=int(icl_d.get("max_iterations", 200)),
            output_dir=d.get("output_dir"),
            disturbance_law=law,
        )
    except ScenarioError:
        raise
    except TaskError as exc:
        raise ScenarioError(str(exc)) from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"malformed scenario: {exc!r}") from exc
    if sc.mode == est.PROBABILISTIC:
        if not (0 < sc.epsilon < 1 and 0 < sc.beta < 1):
            raise ScenarioError("epsilon and beta must lie in (0, 1)")
    return sc


def load_scenario(path_or_name) -> Scenario:
    """Load a scenario file, or a builtin scenario by name (``"sec5"``)."""
    key = str(path_or_name)
    if key in BUILTIN and not os.path.exists(key):
        text = resources.files("iclmpc").joinpath("data", BUILTIN[key]).read_text()
    else:
        try:
            text = Path(key).read_text()
        except OSError as exc:
            raise ScenarioError(f"cannot read scenario {key}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"invalid JSON: {exc}") from exc
    return scenario_from_dict(data)


# ----------------------------------------------------------------------
@dataclass
class ValidationReport:
    eps_hat: float
    mean_cost: float
    cost_ratio: float
    baseline_mean_cost: float
    trials: int
    failures: int = 0
    aborted: int = 0
    mean_cost_all: float = float("nan")
    estimate_violation_rate: float = 0.0
    paired_cost_ratio: float = float("nan")
    costs: list = field(default_factory=list, repr=False)
    baseline_costs: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "eps_hat", "mean_cost", "cost_ratio", "baseline_mean_cost", "trials", "failures",
            "aborted", "mean_cost_all", "estimate_violation_rate", "paired_cost_ratio")}
        return {k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in d.items()}


def disturbance_draws(task: LtiTask, n_trials: int, seed: int) -> np.ndarray:
    """``(n_trials, T, n)`` array; trial ``i`` uses stream ``(seed, 3, i)``."""
    return np.array([sample_disturbance(task.W, rng_stream(seed, STREAM_VALIDATE, i), size=task.T)
                     for i in range(n_trials)])


def baseline_costs(task: LtiTask, draws: np.ndarray, controller: MpcController | None = None):
    """Closed-loop records with the true constraint set, one per draw."""
    ctl = controller or MpcController(task)
    truth = est.ConstraintEstimate(task.Z_true_state, task.U, "true", 0)
    term = terminal_set(task, truth)
    return [rollout(task, ctl, truth, term, disturbances=w, j=i) for i, w in enumerate(draws)]


def monte_carlo_validate(task: LtiTask, estimate, terminal: Polytope | None, n_trials: int,
                         seed: int = 0, *, draws: np.ndarray | None = None,
                         baseline: Sequence[IterationRecord] | None = None,
                         controller: MpcController | None = None) -> ValidationReport:
    """Replay ``n_trials`` disturbance draws with a frozen estimate and with the true set.

    ``eps_hat`` counts trials violating the true constraints or aborting.
    ``mean_cost`` averages successful trials; ``baseline_mean_cost`` averages
    the true-set runs over all draws.  ``paired_cost_ratio`` restricts both
    averages to the trials the estimate completed successfully.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    if isinstance(estimate, Polytope):
        estimate = est.ConstraintEstimate(estimate, task.U, "given", 0)
    terminal = terminal_set(task, estimate) if terminal is None else terminal
    draws = disturbance_draws(task, n_trials, seed) if draws is None else np.asarray(draws)[:n_trials]
    ctl = controller or MpcController(task)
    recs = [rollout(task, ctl, estimate, terminal, disturbances=w, j=i) for i, w in enumerate(draws)]
    base = list(baseline)[:n_trials] if baseline is not None else baseline_costs(task, draws, ctl)
    ok = np.array([r.success for r in recs])
    aborted = sum(r.aborted_at is not None for r in recs)
    costs = np.array([r.cost for r in recs])
    bcosts = np.array([r.cost for r in base])
    mean_cost = float(np.mean(costs[ok])) if ok.any() else float("nan")
    complete = np.array([r.aborted_at is None for r in recs])
    mean_all = float(np.mean(costs[complete])) if complete.any() else float("nan")
    base_mean = float(np.mean(bcosts))
    paired = float(np.mean(costs[ok]) / np.mean(bcosts[ok])) if ok.any() else float("nan")
    X = estimate.state_set
    est_viol = float(np.mean([not np.all(X.H @ r.states.T <= X.h[:, None] + 1e-7) for r in recs]))
    return ValidationReport(
        eps_hat=float(np.mean(~ok)),
        mean_cost=mean_cost,
        cost_ratio=mean_cost / base_mean if np.isfinite(mean_cost) else float("nan"),
        baseline_mean_cost=base_mean,
        trials=n_trials,
        failures=int(np.count_nonzero(~ok)),
        aborted=int(aborted),
        mean_cost_all=mean_all,
        estimate_violation_rate=est_viol,
        paired_cost_ratio=paired,
        costs=costs.tolist(),
        baseline_costs=bcosts.tolist(),
    )


def performance_loss(report: ValidationReport) -> float:
    return report.mean_cost - report.baseline_mean_cost


# ----------------------------------------------------------------------
# run directories
def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1))


def write_run(out: Path, scenario: Scenario, state: RunState, records: Sequence[IterationRecord],
              scenario_source: dict | None = None) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    task = scenario.task
    summary = state.summary()
    summary.update({
        "schema_version": SCHEMA_VERSION,
        "scenario": scenario.name,
        "master_seed": scenario.master_seed,
        "epsilon": state.certificate.epsilon,
        "beta": state.certificate.beta,
        "final_estimate": state.estimate.to_dict(),
        "terminal_set": state.terminal.to_dict(),
        "task": task.to_dict(),
        "scenario_config": scenario_source,
    })
    _dump(out / "run.json", summary)
    _dump(out / "certificate.json", state.certificate.to_dict())
    for rec in list(state.warm_records) + list(records):
        _dump(out / f"iter_{rec.j}.json", rec.to_dict())
    for j, e in sorted(state.estimates.items()):
        _dump(out / f"estimate_{j}.json", e.to_dict())
    write_trajectory_csv(list(state.warm_records) + list(records), out / "trajectory.csv", task.n, task.m)


def read_run(run_dir) -> dict:
    run_dir = Path(run_dir)
    try:
        info = json.loads((run_dir / "run.json").read_text())
        cert = json.loads((run_dir / "certificate.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"not a run directory: {run_dir} ({exc})") from exc
    task = LtiTask.from_dict(info["task"])
    estimate = est.ConstraintEstimate.from_dict(info["final_estimate"])
    terminal = Polytope.from_dict(info["terminal_set"])
    estimates = {}
    for p in run_dir.glob("estimate_*.json"):
        j = int(p.stem.split("_", 1)[1])
        estimates[j] = est.ConstraintEstimate.from_dict(json.loads(p.read_text()))
    return {"info": info, "certificate": est.Certificate.from_dict(cert), "task": task,
            "estimate": estimate, "terminal": terminal, "estimates": estimates}


def table_rows(run_dirs: Sequence, trials: int = 100, seed: int | None = None) -> list[dict]:
    """One row per run: epsilon, j_bar, eps_hat, cost_ratio (paired draws across runs)."""
    rows = []
    draws = None
    base = None
    for rd in run_dirs:
        r = read_run(rd)
        task = r["task"]
        s = r["info"].get("master_seed", 0) if seed is None else seed
        if draws is None:
            draws = disturbance_draws(task, trials, s)
            base = baseline_costs(task, draws)
        rep = None
        if r["certificate"].closed:
            rep = monte_carlo_validate(task, r["estimate"], r["terminal"], trials, draws=draws, baseline=base)
        rows.append({
            "epsilon": r["certificate"].epsilon,
            "j_bar": r["certificate"].j_bar,
            "eps_hat": None if rep is None else rep.eps_hat,
            "cost_ratio": None if rep is None else rep.cost_ratio,
            "eps_hat_estimate": None if rep is None else rep.estimate_violation_rate,
            "run": str(rd),
        })
    return rows


def rows_to_csv(rows: list[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["" if r.get(c) is None else r[c] for c in columns])
    return buf.getvalue()


def plotdata_rows(run_dir) -> list[dict]:
    """Vertices (counter-clockwise) of every per-iteration estimate and of the true set."""
    r = read_run(run_dir)
    out = []

    def add(label, j, P):
        try:
            V = vertices(P)
        except Exception:  # non-2D or empty sets are skipped
            return
        for k, v in enumerate(V):
            out.append({"set": label, "j": j, "vertex": k, "x1": float(v[0]), "x2": float(v[1])})

    for j, e in sorted(r["estimates"].items()):
        add(e.method, j, e.state_set)
    add("true", "", r["task"].Z_true_state)
    return out
