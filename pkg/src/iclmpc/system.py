"""Disturbed LTI plant, disturbance sampling, closed-loop rollouts and the
ground-truth feasibility oracle.

The true state constraint set lives on :class:`LtiTask` so that the simulator
can label trajectories.  Controller-side code (``rmpc``, ``estimator``,
``svm``) must only ever see a :class:`~iclmpc.estimator.ConstraintEstimate`
and the known part of the constraints.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from .geometry import Polytope, contains, support, UnboundedError

FLAG_TOL = 1e-7
"""Absolute slack used when labelling states against the true constraints."""


class TaskError(ValueError):
    """An :class:`LtiTask` violates one of its invariants."""


class UnsupportedDistributionError(ValueError):
    """Disturbance sampling was requested on a set it cannot sample from."""


class ControlInfeasible(RuntimeError):
    """Raised by a policy when it cannot produce an admissible input."""

    def __init__(self, message: str, t: int | None = None, report=None):
        super().__init__(message)
        self.t = t
        self.report = report


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator derived from a master seed and integer keys."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def _rows_subset(sub: Polytope, full: Polytope, tol: float = 1e-12) -> bool:
    for H_i, h_i in zip(sub.H, sub.h):
        dH = np.max(np.abs(full.H - H_i), axis=1)
        if not np.any((dH <= tol) & (np.abs(full.h - h_i) <= tol)):
            return False
    return True


@dataclass(frozen=True, eq=False)
class LtiTask:
    """Everything the simulator needs to run one iterative task.

    ``Z_true_state`` is the ground truth used only for labelling; the
    controller works from ``Z_known_state`` plus learned data.
    """

    A: np.ndarray
    B: np.ndarray
    W: Polytope
    Z_true_state: Polytope
    Z_known_state: Polytope
    U: Polytope
    x_S: np.ndarray
    x_ref: np.ndarray
    T: int
    N: int
    Q_stage: np.ndarray
    R_stage: np.ndarray
    K: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "x_S", "x_ref", "Q_stage", "R_stage", "K"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "T", int(self.T))
        object.__setattr__(self, "N", int(self.N))
        self.validate()

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def A_cl(self) -> np.ndarray:
        return self.A + self.B @ self.K

    def validate(self) -> None:
        A, B = self.A, self.B
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise TaskError("A must be square")
        n = A.shape[0]
        if B.ndim != 2 or B.shape[0] != n:
            raise TaskError("B must have as many rows as A")
        m = B.shape[1]
        if self.K.shape != (m, n):
            raise TaskError(f"K must be {m}x{n}")
        if self.Q_stage.shape != (n, n) or self.R_stage.shape != (m, m):
            raise TaskError("stage cost matrices have the wrong shape")
        if self.x_S.shape != (n,) or self.x_ref.shape != (n,):
            raise TaskError("x_S and x_ref must be state vectors")
        for name, P, d in (("W", self.W, n), ("Z_true_state", self.Z_true_state, n),
                           ("Z_known_state", self.Z_known_state, n), ("U", self.U, m)):
            if P.dim != d:
                raise TaskError(f"{name} has dimension {P.dim}, expected {d}")
        if self.T < 1 or self.N < 1:
            raise TaskError("T and N must be positive")
        if self.N >= self.T:
            raise TaskError("the horizon N must be shorter than the task length T")
        if np.min(np.linalg.eigvalsh(0.5 * (self.Q_stage + self.Q_stage.T))) < -1e-12:
            raise TaskError("Q_stage must be positive semidefinite")
        if np.min(np.linalg.eigvalsh(0.5 * (self.R_stage + self.R_stage.T))) <= 0:
            raise TaskError("R_stage must be positive definite")
        if not _rows_subset(self.Z_known_state, self.Z_true_state):
            raise TaskError("known state rows must be a subset of the true state rows")
        if not contains(self.Z_true_state, np.zeros(n), tol=0.0):
            raise TaskError("the origin must satisfy the true state constraints")
        if not contains(self.U, np.zeros(m), tol=0.0):
            raise TaskError("the origin must satisfy the input constraints")
        if np.max(np.abs(np.linalg.eigvals(self.A_cl))) >= 1.0:
            raise TaskError("A + BK is not Schur stable")
        try:
            for i in range(n):
                e = np.zeros(n)
                e[i] = 1.0
                support(self.W, e)
                support(self.W, -e)
        except UnboundedError as exc:
            raise TaskError("disturbance set must be bounded") from exc

    def stage_cost(self, x, u) -> float:
        dx = np.asarray(x, dtype=float) - self.x_ref
        u = np.asarray(u, dtype=float)
        return float(dx @ self.Q_stage @ dx + u @ self.R_stage @ u)

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(), "B": self.B.tolist(),
            "W": self.W.to_dict(),
            "Z_true_state": self.Z_true_state.to_dict(),
            "Z_known_state": self.Z_known_state.to_dict(),
            "U": self.U.to_dict(),
            "x_S": self.x_S.tolist(), "x_ref": self.x_ref.tolist(),
            "T": self.T, "N": self.N,
            "Q_stage": self.Q_stage.tolist(), "R_stage": self.R_stage.tolist(),
            "K": self.K.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LtiTask":
        return cls(
            A=d["A"], B=d["B"], W=Polytope.from_dict(d["W"]),
            Z_true_state=Polytope.from_dict(d["Z_true_state"]),
            Z_known_state=Polytope.from_dict(d["Z_known_state"]),
            U=Polytope.from_dict(d["U"]), x_S=d["x_S"], x_ref=d["x_ref"],
            T=d["T"], N=d["N"], Q_stage=d["Q_stage"], R_stage=d["R_stage"], K=d["K"],
        )

    def with_(self, **changes) -> "LtiTask":
        """Copy with some fields replaced (re-validated)."""
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return LtiTask(**fields)


@dataclass(frozen=True, eq=False)
class IterationRecord:
    """One closed-loop task iteration.

    ``aborted_at`` is set when the controller had no feasible input at that
    time step; the trajectory then stops there and the record is not a
    success even if every recorded state is feasible.
    """

    j: int
    states: np.ndarray
    inputs: np.ndarray
    disturbances: np.ndarray
    flags: np.ndarray
    cost: float
    aborted_at: Optional[int] = None
    kind: str = "mpc"

    def __post_init__(self):
        for name, dt in (("states", float), ("inputs", float), ("disturbances", float), ("flags", bool)):
            arr = np.array(getattr(self, name), dtype=dt)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def success(self) -> bool:
        return self.aborted_at is None and bool(np.all(self.flags))

    @property
    def n_violations(self) -> int:
        return int(np.count_nonzero(~self.flags))

    def to_dict(self) -> dict:
        return {
            "j": self.j,
            "kind": self.kind,
            "states": self.states.tolist(),
            "inputs": self.inputs.tolist(),
            "disturbances": self.disturbances.tolist(),
            "flags": [bool(f) for f in self.flags],
            "success": self.success,
            "cost": self.cost,
            "aborted_at": self.aborted_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IterationRecord":
        n = len(d["states"][0]) if d["states"] else 0
        return cls(
            j=int(d["j"]),
            states=np.array(d["states"], dtype=float).reshape(-1, n),
            inputs=np.array(d["inputs"], dtype=float).reshape(len(d["inputs"]), -1) if d["inputs"] else np.zeros((0, 0)),
            disturbances=np.array(d["disturbances"], dtype=float).reshape(-1, n),
            flags=np.array(d["flags"], dtype=bool),
            cost=float(d["cost"]),
            aborted_at=d.get("aborted_at"),
            kind=d.get("kind", "mpc"),
        )


# ----------------------------------------------------------------------
def sample_disturbance(W: Polytope, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Uniform sample(s) on an axis-aligned box ``W``."""
    box = W.as_box()
    if box is None:
        raise UnsupportedDistributionError("uniform sampling is only implemented for axis-aligned boxes")
    lo, hi = box
    shape = lo.shape if size is None else (size,) + lo.shape
    return lo + (hi - lo) * rng.random(shape)


def step(task: LtiTask, x, u, w) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    w = np.asarray(w, dtype=float)
    if x.shape != (task.n,) or u.shape != (task.m,) or w.shape != (task.n,):
        raise ValueError("dimension mismatch in step")
    return task.A @ x + task.B @ u + w


def classify_trajectory(task: LtiTask, states) -> np.ndarray:
    """Per-state feasibility against the true constraints (absolute slack ``FLAG_TOL``)."""
    X = np.atleast_2d(np.asarray(states, dtype=float))
    if X.size == 0:
        return np.zeros(0, dtype=bool)
    Z = task.Z_true_state
    return np.all(X @ Z.H.T <= Z.h + FLAG_TOL, axis=1)


Policy = Callable[[np.ndarray, int], np.ndarray]


def rollout(task: LtiTask, controller, estimate=None, terminal: Polytope | None = None,
            rng: np.random.Generator | None = None, *, disturbances=None,
            j: int = 0, kind: str = "mpc") -> IterationRecord:
    """Simulate one task iteration from ``x_S``.

    ``controller`` is either a policy ``(x, t) -> u`` or an object exposing
    ``policy(estimate, terminal)`` that returns one.  Disturbances are drawn
    from ``rng`` unless a ``(T, n)`` array is supplied, which lets callers
    replay identical draws for different controllers.  A policy signals a
    missing feasible input by raising :class:`ControlInfeasible`; the record
    is then truncated at that step and ``aborted_at`` is set.
    """
    if hasattr(controller, "policy"):
        policy = controller.policy(estimate, terminal)
    else:
        policy = controller
    if disturbances is None:
        if rng is None:
            raise ValueError("need either rng or disturbances")
        disturbances = sample_disturbance(task.W, rng, size=task.T)
    W_seq = np.asarray(disturbances, dtype=float).reshape(task.T, task.n)

    x = task.x_S.copy()
    states = [x]
    inputs = []
    cost = 0.0
    aborted = None
    for t in range(task.T):
        try:
            u = np.atleast_1d(np.asarray(policy(x, t), dtype=float))
        except ControlInfeasible:
            aborted = t
            break
        cost += task.stage_cost(x, u)
        x = step(task, x, u, W_seq[t])
        states.append(x)
        inputs.append(u)
    used = W_seq[: len(inputs)]
    states = np.array(states)
    return IterationRecord(
        j=j,
        states=states,
        inputs=np.array(inputs).reshape(len(inputs), task.m),
        disturbances=used,
        flags=classify_trajectory(task, states),
        cost=cost,
        aborted_at=aborted,
        kind=kind,
    )


def write_trajectory_csv(records: Iterable[IterationRecord], path, n: int, m: int) -> None:
    """Flat CSV with one row per recorded state (inputs/disturbances blank on the last)."""
    header = ["j", "t"] + [f"x{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(m)] \
        + [f"w{i + 1}" for i in range(n)] + ["flag"]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(header)
        for rec in records:
            for t, x in enumerate(rec.states):
                if t < len(rec.inputs):
                    u = [repr(float(v)) for v in rec.inputs[t]]
                    w = [repr(float(v)) for v in rec.disturbances[t]]
                else:
                    u, w = [""] * m, [""] * n
                out.writerow([rec.j, t] + [repr(float(v)) for v in x] + u + w + [int(rec.flags[t])])
