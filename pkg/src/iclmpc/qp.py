"""Operator-splitting QP backend.

Solves::

    minimize    1/2 x'Px + q'x
    subject to  l_i <= (Ax)_i <= u_i                      (interval rows)
                sum_k w_k |(Ax)_k - o_k| + (Ax)_c <= b     (abs-value blocks)

with an OSQP-style ADMM iteration.  The absolute-value blocks are exactly the
robust counterpart of an affine-in-disturbance constraint over a box, so the
robust MPC problem is handled without lifting variables.  A converged (or
nearly converged) iterate is refined by solving the equality-constrained QP on
its active set and accepting it when the KKT conditions check out.

The iteration loop lives in ``iclmpc._admm`` (Cython) with a NumPy fallback in
``iclmpc._admm_py``.  Set ``ICLMPC_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, lu_factor, lu_solve
from scipy.sparse import csr_matrix

from . import _admm_py

log = logging.getLogger(__name__)

_compiled = None
if not os.environ.get("ICLMPC_PURE_PYTHON"):
    try:
        from . import _admm as _compiled  # type: ignore[no-redef]
    except ImportError:  # pragma: no cover - depends on the build
        _compiled = None

BACKENDS = {"python": _admm_py.admm_run}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled.admm_run
DEFAULT_BACKEND = "compiled" if _compiled is not None else "python"

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"


@dataclass
class AdmmSettings:
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    max_iter: int = 50_000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    check_every: int = 10
    chunk: int = 200
    adaptive_rho: bool = True
    adaptive_rho_tolerance: float = 5.0
    eps_pinf: float = 1e-7
    polish: bool = True
    polish_delta: float = 1e-9
    # try polishing once residuals are within this factor of the tolerances
    polish_window: float = 1e3
    backend: Optional[str] = None


@dataclass
class QpReport:
    status: str
    objective: float
    primal_residual: float
    dual_residual: float
    iterations: int = 0
    polished: bool = False

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "objective": self.objective,
            "primal_residual": self.primal_residual,
            "dual_residual": self.dual_residual,
            "iterations": self.iterations,
            "polished": self.polished,
        }


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    report: QpReport


class ConeQP:
    """Fixed problem structure; ``q``, bounds and block right-hand sides vary per solve.

    Parameters
    ----------
    P : (n, n) array
    A : (m, n) array
    m_box : int
        Number of leading interval rows.
    block_sizes : sequence of int
        Number of absolute-value rows in each block (the linear row is extra).
    weights, shifts : arrays of length ``m - m_box``
        ``w_k`` and ``o_k`` for the block rows (ignored on the linear rows).
    """

    def __init__(self, P, A, m_box: int, block_sizes: Sequence[int] = (),
                 weights=None, shifts=None, settings: AdmmSettings | None = None):
        self.P = np.ascontiguousarray(P, dtype=float)
        self.A = np.ascontiguousarray(np.atleast_2d(A), dtype=float)
        self.n = self.P.shape[0]
        self.m = self.A.shape[0]
        if self.A.shape[1] != self.n:
            raise ValueError("A and P disagree on the number of variables")
        self.m_box = int(m_box)
        sizes = np.asarray(block_sizes, dtype=np.int64)
        self.cone_ptr = np.concatenate([[0], np.cumsum(sizes + 1)]).astype(np.int32)
        if self.m_box + int(self.cone_ptr[-1]) != self.m:
            raise ValueError("row count does not match m_box + blocks")
        m_c = self.m - self.m_box
        self.cone_w = np.zeros(self.m)
        self.cone_o = np.zeros(self.m)
        if m_c:
            self.cone_w[self.m_box:] = np.asarray(weights, dtype=float)
            self.cone_o[self.m_box:] = np.asarray(shifts, dtype=float)
        if np.any(self.cone_w < 0):
            raise ValueError("block weights must be nonnegative")
        self.settings = settings or AdmmSettings()
        A_csr = csr_matrix(self.A)
        AT_csr = csr_matrix(self.A.T)
        self._A = (A_csr.indptr.astype(np.int32), A_csr.indices.astype(np.int32), A_csr.data.copy())
        self._AT = (AT_csr.indptr.astype(np.int32), AT_csr.indices.astype(np.int32), AT_csr.data.copy())
        self._factor_cache: dict[tuple, np.ndarray] = {}
        self._rho = None
        self._last_warm = None

    @property
    def n_blocks(self) -> int:
        return len(self.cone_ptr) - 1

    def block_rows(self, c: int):
        r0 = self.m_box + int(self.cone_ptr[c])
        r1 = self.m_box + int(self.cone_ptr[c + 1]) - 1
        return np.arange(r0, r1), r1

    # ------------------------------------------------------------------
    def _rho_vector(self, rho: float, l, u) -> np.ndarray:
        vec = np.full(self.m, rho)
        box_l, box_u = l[: self.m_box], u[: self.m_box]
        eq = np.abs(box_u - box_l) < 1e-9
        free = np.isinf(box_l) & np.isinf(box_u)
        vec[: self.m_box][eq] = rho * 1e3
        vec[: self.m_box][free] = 1e-6
        return vec

    def _factor(self, rho_vec: np.ndarray, sigma: float) -> np.ndarray:
        key = (rho_vec.tobytes(), sigma)
        L = self._factor_cache.get(key)
        if L is None:
            K = self.P + sigma * np.eye(self.n) + self.A.T @ (rho_vec[:, None] * self.A)
            c, _ = cho_factor(K, lower=True, check_finite=False)
            L = np.ascontiguousarray(np.tril(c))
            if len(self._factor_cache) > 16:
                self._factor_cache.clear()
            self._factor_cache[key] = L
        return L

    def objective(self, x, q) -> float:
        return float(0.5 * x @ self.P @ x + q @ x)

    # ------------------------------------------------------------------
    def constraint_violation(self, x, l, u, b) -> float:
        """Largest violation of any constraint at ``x`` (0 when feasible)."""
        ax = self.A @ x
        viol = 0.0
        if self.m_box:
            box = ax[: self.m_box]
            viol = max(viol, float(np.max(np.maximum(l[: self.m_box] - box, box - u[: self.m_box]))))
        for c in range(self.n_blocks):
            rows, crow = self.block_rows(c)
            g = np.sum(self.cone_w[rows] * np.abs(ax[rows] - self.cone_o[rows])) + ax[crow] - b[c]
            viol = max(viol, float(g))
        return max(viol, 0.0)

    def _support(self, dy, l, u, b) -> float:
        """Support function of the constraint set evaluated at ``dy``."""
        tol = 1e-9 * max(1.0, float(np.max(np.abs(dy))))
        total = 0.0
        if self.m_box:
            d = dy[: self.m_box]
            lo, hi = l[: self.m_box], u[: self.m_box]
            pos, neg = d > tol, d < -tol
            if np.any(np.isinf(hi[pos])) or np.any(np.isinf(lo[neg])):
                return np.inf
            total += float(hi[pos] @ d[pos] + lo[neg] @ d[neg])
        for c in range(self.n_blocks):
            rows, crow = self.block_rows(c)
            dc = dy[crow]
            da = dy[rows]
            if dc < -tol or np.any(np.abs(da) > dc * self.cone_w[rows] + tol):
                return np.inf
            total += dc * b[c] + float(da @ self.cone_o[rows])
        return total

    # ------------------------------------------------------------------
    def solve(self, q, l=None, u=None, b=None, warm: QpSolution | None = None,
              settings: AdmmSettings | None = None) -> QpSolution:
        s = settings or self.settings
        backend = BACKENDS[s.backend or DEFAULT_BACKEND]
        q = np.ascontiguousarray(q, dtype=float)
        l = np.full(self.m, -np.inf) if l is None else np.asarray(l, dtype=float).copy()
        u = np.full(self.m, np.inf) if u is None else np.asarray(u, dtype=float).copy()
        if l.shape[0] < self.m:
            l = np.concatenate([l, np.full(self.m - l.shape[0], -np.inf)])
            u = np.concatenate([u, np.full(self.m - u.shape[0], np.inf)])
        b = np.zeros(0) if b is None else np.ascontiguousarray(b, dtype=float)
        if b.shape[0] != self.n_blocks:
            raise ValueError("need one right-hand side per block")
        if np.any(l[: self.m_box] > u[: self.m_box]):
            rep = QpReport(INFEASIBLE, np.inf, np.inf, np.inf)
            return QpSolution(np.zeros(self.n), np.zeros(self.m), np.zeros(self.m), rep)

        if warm is not None:
            x, z, y = warm.x.copy(), warm.z.copy(), warm.y.copy()
        else:
            x, z, y = np.zeros(self.n), np.zeros(self.m), np.zeros(self.m)
        dy = np.zeros(self.m)
        rho = self._rho if (self._rho is not None and warm is not None) else s.rho
        l_c = np.ascontiguousarray(np.where(np.isinf(l), np.sign(l) * 1e30, l))
        u_c = np.ascontiguousarray(np.where(np.isinf(u), np.sign(u) * 1e30, u))

        total = 0
        last_polish_active = None
        stats = None
        while total < s.max_iter:
            rho_vec = self._rho_vector(rho, l, u)
            L = self._factor(rho_vec, s.sigma)
            budget = min(s.chunk, s.max_iter - total)
            stats = backend(self.P, *self._A, *self._AT, L, q, l_c, u_c, rho_vec,
                            s.sigma, s.alpha, self.m_box, self.cone_ptr, self.cone_w,
                            self.cone_o, b, x, z, y, dy, budget, s.check_every,
                            s.eps_abs, s.eps_rel)
            it, status, r_p, r_d, n_ax, n_z, n_px, n_aty, n_q = stats
            total += it
            e_p = s.eps_abs + s.eps_rel * max(n_ax, n_z)
            e_d = s.eps_abs + s.eps_rel * max(n_px, n_aty, n_q)
            if status == 0:
                sol = QpSolution(x, y, z, QpReport(OPTIMAL, self.objective(x, q), r_p, r_d, total))
                if s.polish:
                    polished = self._polish(sol, q, l, u, b, s)
                    if polished is not None:
                        sol = polished
                self._rho = rho
                return sol
            if s.polish and r_p <= s.polish_window * e_p and r_d <= s.polish_window * e_d:
                active = self._active_set(z, y, l, u, b)
                key = (active[0].tobytes(), active[1].tobytes(), active[2].tobytes())
                if key != last_polish_active:
                    last_polish_active = key
                    sol = QpSolution(x, y, z, QpReport(OPTIMAL, self.objective(x, q), r_p, r_d, total))
                    polished = self._polish(sol, q, l, u, b, s, active=active)
                    if polished is not None:
                        self._rho = rho
                        return polished
            if self._primal_infeasible(dy, l, u, b, s):
                rep = QpReport(INFEASIBLE, np.inf, r_p, r_d, total)
                return QpSolution(x, y, z, rep)
            if s.adaptive_rho:
                num = r_p / max(n_ax, n_z, 1e-12)
                den = r_d / max(n_px, n_aty, n_q, 1e-12)
                new_rho = float(np.clip(rho * np.sqrt(num / max(den, 1e-30)), 1e-6, 1e6))
                if new_rho > rho * s.adaptive_rho_tolerance or new_rho < rho / s.adaptive_rho_tolerance:
                    rho = new_rho
        it, status, r_p, r_d = stats[:4]
        rep = QpReport(MAX_ITER, self.objective(x, q), r_p, r_d, total)
        return QpSolution(x, y, z, rep)

    def _primal_infeasible(self, dy, l, u, b, s: AdmmSettings) -> bool:
        norm = float(np.max(np.abs(dy))) if self.m else 0.0
        if norm <= 1e-12:
            return False
        dyn = dy / norm
        if np.max(np.abs(self.A.T @ dyn)) > s.eps_pinf:
            return False
        return self._support(dyn, l, u, b) < -s.eps_pinf

    # ------------------------------------------------------------------
    def _active_set(self, z, y, l, u, b):
        mb = self.m_box
        lower = np.zeros(self.m, dtype=bool)
        upper = np.zeros(self.m, dtype=bool)
        if mb:
            lower[:mb] = (z[:mb] - l[:mb] < -y[:mb]) & np.isfinite(l[:mb])
            upper[:mb] = (u[:mb] - z[:mb] < y[:mb]) & np.isfinite(u[:mb])
            both = lower & upper
            # equality rows: keep a single copy
            upper[both] = False
        cone_active = np.zeros(self.n_blocks, dtype=bool)
        for c in range(self.n_blocks):
            rows, crow = self.block_rows(c)
            slack = b[c] - (np.sum(self.cone_w[rows] * np.abs(z[rows] - self.cone_o[rows])) + z[crow])
            cone_active[c] = slack < y[crow]
        return lower, upper, cone_active

    def _polish(self, sol: QpSolution, q, l, u, b, s: AdmmSettings, active=None):
        lower, upper, cone_active = active if active is not None else self._active_set(sol.z, sol.y, l, u, b)
        rows_G, rhs_g, kinds = [], [], []
        for i in np.flatnonzero(lower):
            rows_G.append(self.A[i]); rhs_g.append(l[i]); kinds.append(("box", i))
        for i in np.flatnonzero(upper):
            rows_G.append(self.A[i]); rhs_g.append(u[i]); kinds.append(("box", i))
        cone_info = []
        for c in np.flatnonzero(cone_active):
            rows, crow = self.block_rows(c)
            w = self.cone_w[rows]
            o = self.cone_o[rows]
            d = sol.z[rows] - o
            scale = max(1.0, float(np.max(np.abs(sol.z[rows]))) if rows.size else 1.0)
            kink = (np.abs(d) <= 1e-9 * scale) & (w > 0)
            sgn = np.where(kink | (w == 0), 0.0, np.sign(d))
            g = self.A[crow] + (w * sgn) @ self.A[rows]
            rows_G.append(g); rhs_g.append(b[c] + float((w * sgn) @ o)); kinds.append(("cone", c))
            for i in rows[kink]:
                rows_G.append(self.A[i]); rhs_g.append(self.cone_o[i]); kinds.append(("kink", i))
            cone_info.append((c, rows, crow, w, sgn))
        k = len(rows_G)
        n = self.n
        G = np.array(rows_G).reshape(k, n)
        g = np.array(rhs_g, dtype=float)
        delta = s.polish_delta
        KKT = np.zeros((n + k, n + k))
        KKT[:n, :n] = self.P
        KKT[:n, n:] = G.T
        KKT[n:, :n] = G
        K_reg = KKT.copy()
        K_reg[:n, :n] += delta * np.eye(n)
        K_reg[n:, n:] -= delta * np.eye(k)
        try:
            lu = lu_factor(K_reg, check_finite=False)
        except (ValueError, np.linalg.LinAlgError):
            return None
        rhs = np.concatenate([-q, g])
        sol_vec = lu_solve(lu, rhs, check_finite=False)
        for _ in range(5):
            sol_vec = sol_vec + lu_solve(lu, rhs - KKT @ sol_vec, check_finite=False)
        if not np.all(np.isfinite(sol_vec)):
            return None
        x = sol_vec[:n]
        nu = sol_vec[n:]
        y = np.zeros(self.m)
        for (kind, idx), val in zip(kinds, nu):
            if kind == "box":
                y[idx] += val
            elif kind == "kink":
                y[idx] = val
        lam = {c: nu[j] for j, (kind, c) in enumerate(kinds) if kind == "cone"}
        for c, rows, crow, w, sgn in cone_info:
            y[crow] = lam[c]
            nonkink = sgn != 0
            y[rows[nonkink]] = lam[c] * w[nonkink] * sgn[nonkink]

        ax = self.A @ x
        scale_p = max(1.0, float(np.max(np.abs(ax))) if self.m else 1.0)
        tol_p = s.eps_abs + s.eps_rel * scale_p
        if self.constraint_violation(x, l, u, b) > tol_p:
            return None
        tol_d = s.eps_abs + s.eps_rel * max(1.0, float(np.max(np.abs(y))) if self.m else 1.0)
        if np.any(y[:self.m_box][lower[:self.m_box]] > tol_d):
            return None
        if np.any(y[:self.m_box][upper[:self.m_box]] < -tol_d):
            return None
        for c, rows, crow, w, sgn in cone_info:
            if lam[c] < -tol_d:
                return None
            kink = (sgn == 0) & (w > 0)
            if np.any(np.abs(y[rows[kink]]) > lam[c] * w[kink] + tol_d):
                return None
        r_d = float(np.max(np.abs(self.P @ x + q + self.A.T @ y)))
        if r_d > s.eps_abs + s.eps_rel * max(1.0, float(np.max(np.abs(q))) if n else 1.0):
            return None
        z = self._project_point(ax, l, u, b)
        rep = QpReport(OPTIMAL, self.objective(x, q),
                       float(np.max(np.abs(ax - z))) if self.m else 0.0, r_d,
                       sol.report.iterations, polished=True)
        return QpSolution(x, y, z, rep)

    def _project_point(self, v, l, u, b) -> np.ndarray:
        z = v.copy()
        blocks = _admm_py._Blocks(self.m_box, self.cone_ptr, self.cone_w, self.cone_o)
        _admm_py.project(z, l[: self.m_box], u[: self.m_box], self.m_box, blocks, b)
        return z


def solve_qp(P, q, A, l, u, settings: AdmmSettings | None = None) -> QpSolution:
    """Convenience wrapper for a plain interval-constrained QP."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    prob = ConeQP(P, A, m_box=A.shape[0], settings=settings)
    return prob.solve(q, l, u)
