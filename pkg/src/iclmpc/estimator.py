"""Constraint estimates, their data-driven updates and certificate bookkeeping."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import svm
from .geometry import Polytope, convex_hull, intersect, scale

KNOWN_ONLY = "known_only"
SVM = "svm"
CVX = "cvx"

PROBABILISTIC = "probabilistic"
ROBUST = "robust"


@dataclass(frozen=True, eq=False)
class ConstraintEstimate:
    """State polytope used by the controller plus the (never estimated) input set."""

    state_set: Polytope
    input_set: Polytope
    method: str
    source_iteration: int
    n_records: int = 0
    n_violations: int = 0
    scalings: int = 0
    model: Optional[svm.SvmModel] = field(default=None, repr=False)

    def same_set(self, other: "ConstraintEstimate") -> bool:
        a, b = self.state_set, other.state_set
        return a.H.shape == b.H.shape and np.array_equal(a.H, b.H) and np.array_equal(a.h, b.h)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "source_iteration": self.source_iteration,
            "state_set": self.state_set.to_dict(),
            "input_set": self.input_set.to_dict(),
            "data": {"n_records": self.n_records, "n_violations": self.n_violations},
            "scalings": self.scalings,
            "model": None if self.model is None else self.model.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConstraintEstimate":
        data = d.get("data", {})
        return cls(
            state_set=Polytope.from_dict(d["state_set"]),
            input_set=Polytope.from_dict(d["input_set"]),
            method=d["method"],
            source_iteration=int(d["source_iteration"]),
            n_records=int(data.get("n_records", 0)),
            n_violations=int(data.get("n_violations", 0)),
            scalings=int(d.get("scalings", 0)),
            model=None if d.get("model") is None else svm.SvmModel.from_dict(d["model"]),
        )


def required_successes(epsilon: float, beta: float) -> int:
    """Smallest integer ``N >= ln(1/beta) / ln(1/(1-epsilon))``."""
    if not (0.0 < epsilon < 1.0):
        raise ValueError("epsilon must lie in (0, 1)")
    if not (0.0 < beta < 1.0):
        raise ValueError("beta must lie in (0, 1)")
    ratio = math.log(beta) / math.log1p(-epsilon)
    # guard against ratios like 4.000000000000001 from rounding
    return max(1, math.ceil(ratio * (1.0 - 1e-12)))


@dataclass(frozen=True)
class Certificate:
    mode: str
    epsilon: float
    beta: Optional[float]
    N_it: Optional[int]
    l: int = 0
    j_bar: Optional[int] = None

    @classmethod
    def new(cls, mode: str, epsilon: float = 0.0, beta: float | None = None) -> "Certificate":
        if mode == PROBABILISTIC:
            return cls(mode, float(epsilon), float(beta), required_successes(epsilon, beta))
        if mode == ROBUST:
            # robust mode requires zero failure probability
            return cls(mode, 0.0, beta, None)
        raise ValueError(f"unknown certificate mode {mode!r}")

    @property
    def closed(self) -> bool:
        return self.j_bar is not None

    def to_dict(self) -> dict:
        return {"mode": self.mode, "epsilon": self.epsilon, "beta": self.beta,
                "N_it": self.N_it, "l": self.l, "j_bar": self.j_bar, "closed": self.closed}

    @classmethod
    def from_dict(cls, d: dict) -> "Certificate":
        return cls(d["mode"], float(d["epsilon"]), d.get("beta"), d.get("N_it"),
                   int(d.get("l", 0)), d.get("j_bar"))


def record_outcome(cert: Certificate, success: bool, estimate_changed: bool,
                   j: int | None = None) -> Certificate:
    """Advance the success counter after iteration ``j``.

    Any failure or estimate change restarts the count.  Once ``N_it``
    consecutive successes accrue, ``j_bar`` is the first iteration of that
    window (``j - N_it + 1``, or 0 when ``j`` is not given).
    """
    if cert.closed or cert.N_it is None:
        return cert
    if estimate_changed or not success:
        return replace(cert, l=0)
    l = cert.l + 1
    if l >= cert.N_it:
        j_bar = (j - l + 1) if j is not None else 0
        return replace(cert, l=l, j_bar=j_bar)
    return replace(cert, l=l)


def close_robust(cert: Certificate, j: int) -> Certificate:
    return replace(cert, j_bar=int(j))


# ----------------------------------------------------------------------
def init_estimate(task) -> ConstraintEstimate:
    return ConstraintEstimate(task.Z_known_state, task.U, KNOWN_ONLY, 1)


def _stack(records):
    states = np.vstack([r.states for r in records])
    flags = np.concatenate([r.flags for r in records])
    return states, flags


def svm_update(records: Sequence, task, config: svm.SvmConfig | None = None,
               rng: np.random.Generator | None = None, j: int = 1) -> ConstraintEstimate:
    """Estimate from an SVM trained on every recorded state and its flag.

    Raises :class:`iclmpc.svm.SvmError` (single class, non-convergence, origin
    misclassified) or :class:`iclmpc.geometry.DegenerateHullError`; callers
    keep their previous estimate in that case.
    """
    config = config or svm.SvmConfig()
    X, flags = _stack(records)
    labels = np.where(flags, 1.0, -1.0)
    known = task.Z_known_state
    model = svm.train(X, labels, config.resolve_gamma(known), config.C, config.class_weight)
    P = svm.inner_polytope(model, known, config.n_samples, rng=rng)
    return ConstraintEstimate(P, task.U, SVM, j, len(records), int(np.count_nonzero(~flags)), model=model)


def cvx_update(records: Sequence, task, j: int = 1) -> ConstraintEstimate:
    """Hull of the origin and every recorded state flagged feasible."""
    X, flags = _stack(records)
    pts = np.vstack([np.zeros((1, X.shape[1])), X[flags]])
    P = convex_hull(pts)
    return ConstraintEstimate(P, task.U, CVX, j, len(records), int(np.count_nonzero(~flags)))


def scale_estimate(est: ConstraintEstimate, gamma: float, known: Polytope) -> ConstraintEstimate:
    """Origin-anchored enlargement by ``gamma``, clipped to the known set."""
    P = intersect(scale(est.state_set, gamma), known)
    return replace(est, state_set=P, scalings=est.scalings + 1)
