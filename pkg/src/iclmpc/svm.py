"""Kernel SVM separating feasible from infeasible states, and the polytope
built from its feasible region.

Labels are ``+1`` for feasible and ``-1`` for infeasible points.  The stored
decision function is sign-flipped so that ``decide(x) <= 0`` means "classified
feasible", and a trained model must classify the origin as feasible.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import qp
from .geometry import Polytope, bounding_box, contains, convex_hull

ORIGIN_TOL = 1e-6


class SvmError(ValueError):
    """Training is impossible or produced an unusable model."""


class SingleClassError(SvmError):
    """Only one label present; callers should keep their previous estimate."""


@dataclass(frozen=True, eq=False)
class SvmConfig:
    gamma: Optional[float] = None  # RBF width; None -> 2 / diam(known)^2
    C: float = 100.0
    class_weight: Optional[dict] = None  # label -> multiplier on C
    n_samples: int = 1000

    def resolve_gamma(self, known: Polytope) -> float:
        if self.gamma is not None:
            return float(self.gamma)
        lo, hi = bounding_box(known)
        diam = float(np.linalg.norm(hi - lo))
        return 2.0 / diam ** 2

    def to_dict(self) -> dict:
        cw = None if self.class_weight is None else {str(k): v for k, v in self.class_weight.items()}
        return {"gamma": self.gamma, "C": self.C, "class_weight": cw, "n_samples": self.n_samples}

    @classmethod
    def from_dict(cls, d: dict) -> "SvmConfig":
        cw = d.get("class_weight")
        if cw is not None:
            cw = {int(k): float(v) for k, v in cw.items()}
        return cls(gamma=d.get("gamma"), C=float(d.get("C", 100.0)), class_weight=cw,
                   n_samples=int(d.get("n_samples", 1000)))


def rbf(X, Y, gamma: float) -> np.ndarray:
    X = np.atleast_2d(X)
    Y = np.atleast_2d(Y)
    d2 = np.sum(X * X, 1)[:, None] + np.sum(Y * Y, 1)[None, :] - 2 * X @ Y.T
    return np.exp(-gamma * np.maximum(d2, 0.0))


@dataclass(frozen=True, eq=False)
class SvmModel:
    support_points: np.ndarray
    labels: np.ndarray
    alphas: np.ndarray
    bias: float
    gamma: float
    C: float
    sign: float = -1.0

    def raw(self, X) -> np.ndarray:
        """Standard SVM score ``sum a_i y_i k(p_i, x) + b`` (positive = feasible)."""
        K = rbf(X, self.support_points, self.gamma)
        return K @ (self.alphas * self.labels) + self.bias

    def to_dict(self) -> dict:
        return {
            "kernel": {"type": "rbf", "gamma": self.gamma},
            "C": self.C,
            "support_points": self.support_points.tolist(),
            "labels": self.labels.astype(int).tolist(),
            "alphas": self.alphas.tolist(),
            "bias": self.bias,
            "sign": self.sign,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SvmModel":
        pts = np.array(d["support_points"], dtype=float)
        return cls(
            support_points=pts.reshape(len(d["labels"]), -1),
            labels=np.array(d["labels"], dtype=float),
            alphas=np.array(d["alphas"], dtype=float),
            bias=float(d["bias"]),
            gamma=float(d["kernel"]["gamma"]),
            C=float(d["C"]),
            sign=float(d.get("sign", -1.0)),
        )


def decide(model: SvmModel, x):
    """Signed decision value; ``<= 0`` means classified feasible.

    Accepts a single point or an array of points (one per row).
    """
    x = np.asarray(x, dtype=float)
    vals = model.sign * model.raw(np.atleast_2d(x))
    return float(vals[0]) if x.ndim == 1 else vals


def _bias(alpha, y, g, C_i, tol):
    """Bias from free support vectors, or the midpoint of the KKT interval."""
    free = (alpha > tol * C_i) & (alpha < C_i * (1 - tol))
    if np.any(free):
        return float(np.mean(y[free] - g[free]))
    # y_i (g_i + b) >= 1 at alpha = 0, <= 1 at alpha = C
    lower, upper = -np.inf, np.inf
    at0 = alpha <= tol * C_i
    atC = ~at0
    r = y - g
    lower = max(lower, np.max(r[at0 & (y > 0)], initial=-np.inf), np.max(r[atC & (y < 0)], initial=-np.inf))
    upper = min(upper, np.min(r[at0 & (y < 0)], initial=np.inf), np.min(r[atC & (y > 0)], initial=np.inf))
    if np.isfinite(lower) and np.isfinite(upper):
        return 0.5 * (lower + upper)
    return float(lower if np.isfinite(lower) else upper)


def train(points, labels, gamma: float, C: float = 100.0, class_weight: dict | None = None,
          settings: qp.AdmmSettings | None = None, require_origin: bool = True) -> SvmModel:
    """Soft-margin RBF SVM via its dual QP.

    Raises :class:`SingleClassError` when only one label is present and
    :class:`SvmError` if the solver does not reach the KKT tolerance or the
    origin ends up classified infeasible.
    """
    X = np.atleast_2d(np.asarray(points, dtype=float))
    y = np.asarray(labels, dtype=float).ravel()
    if X.shape[0] != y.shape[0]:
        raise SvmError("points and labels differ in length")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise SvmError("labels must be +1 or -1")
    if np.all(y > 0) or np.all(y < 0):
        raise SingleClassError("training data contains a single class")
    if gamma <= 0 or C <= 0:
        raise SvmError("gamma and C must be positive")
    weights = class_weight or {}
    C_i = C * np.array([weights.get(int(v), 1.0) for v in y])

    K = rbf(X, X, gamma)
    Pm = (y[:, None] * y[None, :]) * K
    n = len(y)
    Aeq = np.vstack([np.eye(n), y[None, :]])
    lo = np.concatenate([np.zeros(n), [0.0]])
    hi = np.concatenate([C_i, [0.0]])
    s = settings or qp.AdmmSettings(max_iter=200_000)
    prob = qp.ConeQP(Pm, Aeq, m_box=n + 1, settings=s)
    sol = prob.solve(-np.ones(n), lo, hi)
    if sol.report.status != qp.OPTIMAL:
        raise SvmError(f"SVM dual did not converge ({sol.report.status})")
    alpha = np.clip(sol.x, 0.0, C_i)
    # restore sum(alpha y) = 0 exactly on the free coordinates
    resid = float(alpha @ y)
    free = (alpha > 0) & (alpha < C_i)
    if abs(resid) > 0 and np.any(free):
        alpha[free] -= resid * y[free] / np.count_nonzero(free)
        alpha = np.clip(alpha, 0.0, C_i)
    g = K @ (alpha * y)
    b = _bias(alpha, y, g, C_i, 1e-6)
    keep = alpha > 1e-10 * C
    model = SvmModel(support_points=X[keep], labels=y[keep], alphas=alpha[keep],
                     bias=b, gamma=float(gamma), C=float(C))
    if require_origin and decide(model, np.zeros(X.shape[1])) > ORIGIN_TOL:
        raise SvmError("trained classifier labels the origin infeasible")
    return model


def uniform_box_sampler(known: Polytope) -> Callable[[np.random.Generator, int], np.ndarray]:
    lo, hi = bounding_box(known)

    def draw(rng: np.random.Generator, k: int) -> np.ndarray:
        return lo + (hi - lo) * rng.random((k, lo.shape[0]))

    return draw


def inner_polytope(model: SvmModel, known: Polytope, n_samples: int = 1000, sampler=None,
                   rng: np.random.Generator | None = None) -> Polytope:
    """Hull of the origin and the sampled points classified feasible inside ``known``."""
    dim = known.dim
    if n_samples < dim + 1:
        raise ValueError("need at least dim + 1 samples")
    rng = rng if rng is not None else np.random.default_rng()
    draw = sampler or uniform_box_sampler(known)
    pts = draw(rng, n_samples)
    keep = (decide(model, pts) <= 0) & contains(known, pts, tol=0.0)
    kept = np.vstack([pts[keep], np.zeros((1, dim))])
    return convex_hull(kept)


def probe_violation_fraction(model: SvmModel, P: Polytope, n_probes: int,
                             rng: np.random.Generator) -> float:
    """Fraction of uniform probes inside ``P`` that the model labels infeasible."""
    lo, hi = bounding_box(P)
    got = []
    while sum(len(g) for g in got) < n_probes:
        X = lo + (hi - lo) * rng.random((4 * n_probes, lo.shape[0]))
        got.append(X[contains(P, X, tol=0.0)])
    X = np.vstack(got)[:n_probes]
    return float(np.mean(decide(model, X) > 0))
