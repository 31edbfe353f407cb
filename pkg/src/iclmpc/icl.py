"""Outer learning loop: alternate closed-loop iterations with constraint
estimate updates until a probabilistic or robust certificate closes.

Random streams are derived from the master seed as
``(seed, 0, i)`` for warm-start trajectory ``i``, ``(seed, 1, j)`` for the
disturbances of iteration ``j`` and ``(seed, 2, j)`` for the SVM sampling that
builds the estimate used in iteration ``j``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import estimator as est
from . import qp
from .geometry import GeometryError, Polytope, is_empty
from .rmpc import MpcController, terminal_set
from .svm import SvmConfig, SvmError
from .system import IterationRecord, LtiTask, rng_stream, rollout

log = logging.getLogger(__name__)

STREAM_WARM, STREAM_ITER, STREAM_SVM = 0, 1, 2


@dataclass(frozen=True)
class IclConfig:
    mode: str = est.PROBABILISTIC
    epsilon: float = 0.3
    beta: float = 0.01
    svm: SvmConfig = field(default_factory=SvmConfig)
    warm_start_trajectories: int = 2
    max_iterations: int = 200
    scale_factor: float = 1.25
    max_scalings: int = 8
    qp: qp.AdmmSettings = field(default_factory=qp.AdmmSettings)


@dataclass
class RunState:
    j: int
    records: list
    estimate: est.ConstraintEstimate
    terminal: Polytope
    certificate: est.Certificate
    mode: str
    status: str = "open"  # "certified", "open" or "aborted"
    warm_records: list = field(default_factory=list)
    estimates: dict = field(default_factory=dict)  # iteration -> estimate used
    diagnostics: list = field(default_factory=list)
    failed_iteration: Optional[int] = None

    def summary(self) -> dict:
        return {
            "status": self.status,
            "mode": self.mode,
            "j": self.j,
            "j_bar": self.certificate.j_bar,
            "iterations": len(self.records),
            "failures": sum(not r.success for r in self.records),
            "aborted_iterations": sum(r.aborted_at is not None for r in self.records),
            "estimate_method": self.estimate.method,
            "failed_iteration": self.failed_iteration,
            "diagnostics": list(self.diagnostics),
        }


def warm_start(task: LtiTask, n_traj: int, rng_or_seed) -> list:
    """Random-input excitation runs from ``x_S`` used only to seed the classifier.

    Inputs are uniform on the input box; ``rng_or_seed`` is either one generator
    shared by all trajectories or an integer master seed.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be at least 1")
    box = task.U.as_box()
    if box is None:
        raise ValueError("warm start samples inputs uniformly and needs a box input set")
    lo, hi = box
    out = []
    for i in range(n_traj):
        rng = rng_stream(rng_or_seed, STREAM_WARM, i) if isinstance(rng_or_seed, (int, np.integer)) else rng_or_seed
        U = lo + (hi - lo) * rng.random((task.T, task.m))
        policy = lambda x, t, U=U: U[t]
        out.append(rollout(task, policy, rng=rng, j=-(i + 1), kind="warm"))
    return out


class _Loop:
    def __init__(self, task: LtiTask, config: IclConfig, seed: int, controller: MpcController | None):
        self.task = task
        self.cfg = config
        self.seed = seed
        self.ctl = controller or MpcController(task, config.qp)
        self.notes: list[str] = []

    def prepare(self, estimate: est.ConstraintEstimate):
        """Terminal set for ``estimate``, enlarging the estimate while the MPC is infeasible at ``x_S``."""
        known = self.task.Z_known_state
        cur = estimate
        for _ in range(self.cfg.max_scalings + 1):
            term = terminal_set(self.task, cur)
            if not is_empty(term) and self.ctl.feasible(cur, term):
                return cur, term
            if cur.method == est.KNOWN_ONLY:
                break
            cur = est.scale_estimate(cur, self.cfg.scale_factor, known)
        return None

    def svm_estimate(self, data, j):
        try:
            return est.svm_update(data, self.task, self.cfg.svm, rng_stream(self.seed, STREAM_SVM, j), j)
        except (SvmError, GeometryError) as exc:
            self.notes.append(f"iteration {j}: SVM update skipped ({exc})")
            return None


def run(task: LtiTask, mode: str, config: IclConfig | None = None, seed: int = 0,
        controller: MpcController | None = None):
    """Run the learning loop; returns ``(RunState, records)``."""
    cfg = config or IclConfig(mode=mode)
    if mode not in (est.PROBABILISTIC, est.ROBUST):
        raise ValueError(f"unknown mode {mode!r}")
    loop = _Loop(task, cfg, seed, controller)
    cert = est.Certificate.new(mode, cfg.epsilon, cfg.beta)
    warm = warm_start(task, cfg.warm_start_trajectories, seed) if cfg.warm_start_trajectories else []
    data: list[IterationRecord] = list(warm)
    records: list[IterationRecord] = []

    current = est.init_estimate(task)
    if warm and any(not r.success for r in warm):
        cand = loop.svm_estimate(data, 1)
        if cand is not None:
            current = cand
    prepared = loop.prepare(current)
    if prepared is None and current.method != est.KNOWN_ONLY:
        loop.notes.append("iteration 1: SVM estimate infeasible after scaling, using known constraints")
        current = est.init_estimate(task)
        prepared = loop.prepare(current)
    state = RunState(0, records, current, Polytope.from_box([0] * task.n, [0] * task.n), cert, mode,
                     warm_records=warm, diagnostics=loop.notes)
    if prepared is None:
        state.status = "aborted"
        state.failed_iteration = 1
        loop.notes.append("iteration 1: MPC infeasible at x_S for every admissible estimate")
        return state, records
    current, terminal = prepared

    for j in range(1, cfg.max_iterations + 1):
        state.j = j
        if j >= 2:
            prev = records[-1]
            if not prev.success:
                changed = False
                new_violations = prev.n_violations > 0
                cand = loop.svm_estimate(data, j) if new_violations else None
                if cand is not None and not cand.same_set(current):
                    prepared = loop.prepare(cand)
                    if prepared is None:
                        loop.notes.append(f"iteration {j}: new SVM estimate infeasible after scaling, kept previous")
                    else:
                        current, terminal = prepared
                        changed = True
                if not changed and prev.aborted_at is not None:
                    # mid-iteration infeasibility: enlarge the current estimate
                    scaled = est.scale_estimate(current, cfg.scale_factor, task.Z_known_state)
                    prepared = loop.prepare(scaled) if current.method != est.KNOWN_ONLY else None
                    if prepared is not None:
                        current, terminal = prepared
                        changed = True
                cert = est.record_outcome(cert, False, changed, j - 1)
            else:
                cert = est.record_outcome(cert, True, False, j - 1)
                if cert.closed:
                    break
            if mode == est.ROBUST:
                try:
                    cvx = est.cvx_update(data, task, j)
                except GeometryError as exc:
                    loop.notes.append(f"iteration {j}: hull estimate unavailable ({exc})")
                    cvx = None
                if cvx is not None:
                    term_c = terminal_set(task, cvx)
                    if not is_empty(term_c) and loop.ctl.feasible(cvx, term_c):
                        current, terminal = cvx, term_c
                        cert = est.close_robust(cert, j)
                        state.estimates[j] = current
                        break
        state.estimates[j] = current
        loop.ctl.iteration = j
        rec = rollout(task, loop.ctl, current, terminal, rng_stream(seed, STREAM_ITER, j), j=j)
        records.append(rec)
        data.append(rec)
        log.info("iteration %d: success=%s violations=%d cost=%.3f", j, rec.success, rec.n_violations, rec.cost)
    else:
        state.j = cfg.max_iterations
        loop.notes.append("iteration cap reached without a certificate")

    state.estimate = current
    state.terminal = terminal
    state.certificate = cert
    state.status = "certified" if cert.closed else "open"
    return state, records
