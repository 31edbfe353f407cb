"""Robust MPC with affine disturbance feedback.

At each time step the controller optimizes nominal inputs ``v_k`` and
strictly causal feedback gains ``M_{k,l}`` (``u_k = sum_{l<k} M_{k,l} w_l +
v_k``) so that every state, input and terminal constraint holds for all
disturbance sequences in the box ``W^N``.  Each robust scalar constraint is
affine in the stacked disturbance, so its worst case is the sum of per-stage
box supports ``c'a + sum_i r_i |a_i|`` where ``a`` is affine in the decision
variables.  Those absolute values map directly onto the abs-value blocks of
:class:`iclmpc.qp.ConeQP`, which keeps the problem at its natural size
(``N m + m n N(N-1)/2`` variables).

The terminal set is the set of states from which ``u = Kx`` keeps the
estimated state and input constraints satisfied for the remaining
``T - N`` steps under every disturbance sequence.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from . import qp
from .geometry import Polytope, is_empty, remove_redundant, support
from .system import ControlInfeasible

log = logging.getLogger(__name__)

# MPC solves are accepted when the primal residual of an unconverged run is below this
ACCEPT_PRIMAL = 1e-6
M_REGULARIZATION = 1e-8


class RiccatiError(RuntimeError):
    pass


class UnsupportedDisturbanceError(ValueError):
    """The MPC formulation needs an axis-aligned box disturbance set."""


# ----------------------------------------------------------------------
# LQR pieces
def riccati(A, B, Q, R, tol: float = 1e-10, max_iter: int = 100_000) -> np.ndarray:
    """Stabilizing DARE solution by value iteration from ``P = Q``."""
    A, B, Q, R = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, Q, R))
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        G = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = Q + A.T @ P @ A - A.T @ P @ B @ G
        P_next = 0.5 * (P_next + P_next.T)
        if np.max(np.abs(P_next - P)) <= tol * max(1.0, np.max(np.abs(P_next))):
            return P_next
        P = P_next
    raise RiccatiError("Riccati iteration did not converge")


def lqr_gain(A, B, Q, R) -> np.ndarray:
    """Gain ``K`` such that ``u = Kx`` is the infinite-horizon LQR law."""
    A, B, R = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, R))
    P = riccati(A, B, Q, R)
    return -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


def terminal_cost(task) -> np.ndarray:
    """Riccati matrix for the task's stage cost, used as the terminal weight."""
    return riccati(task.A, task.B, task.Q_stage, task.R_stage)


# ----------------------------------------------------------------------
def _sets(estimate):
    if isinstance(estimate, Polytope):
        return estimate, None
    return estimate.state_set, estimate.input_set


def terminal_set(task, estimate, steps: int | None = None, reduce: bool = True) -> Polytope:
    """States kept robustly admissible by ``u = Kx`` for ``steps`` more steps.

    Row ``r`` at step ``i`` reads ``H_r A_cl^i x <= h_r - sum_{s<i} support(W, (H_r A_cl^s)')``
    for the estimated state rows and the input rows mapped through ``K``.
    """
    steps = task.T - task.N if steps is None else int(steps)
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    X, U = _sets(estimate)
    U = task.U if U is None else U
    K = task.K
    A_cl = task.A + task.B @ K
    H_rows = [X.H, U.H @ K]
    h_rows = [X.h, U.h]
    blocks_H, blocks_h = [], []
    for H0, h0 in zip(H_rows, h_rows):
        G = H0.copy()  # H0 A_cl^i
        tight = np.zeros(len(h0))
        for i in range(steps + 1):
            blocks_H.append(G.copy())
            blocks_h.append(h0 - tight)
            tight = tight + np.array([support(task.W, g) for g in G])
            G = G @ A_cl
    H = np.vstack(blocks_H)
    h = np.concatenate(blocks_h)
    keep = np.linalg.norm(H, axis=1) > 1e-12 * max(1.0, np.max(np.abs(H)))
    # rows annihilated by A_cl^i are constant conditions 0 <= h
    if np.any(h[~keep] < 0):
        return Polytope(np.vstack([np.eye(task.n)[:1], -np.eye(task.n)[:1]]), np.array([-1.0, -1.0]))
    P = Polytope(H[keep], h[keep])
    if reduce and not is_empty(P):
        P = remove_redundant(P)
    return P


# ----------------------------------------------------------------------
@dataclass
class MpcDecision:
    """Optimized policy: ``M[k, l]`` (zero for ``l >= k``), ``v[k]`` and the nominal states."""

    M: np.ndarray
    v: np.ndarray
    nominal_states: np.ndarray

    def to_dict(self) -> dict:
        return {"M": self.M.tolist(), "v": self.v.tolist(),
                "nominal_states": self.nominal_states.tolist()}


@dataclass
class _Constraint:
    kind: str  # "state", "input" or "terminal"
    k: int
    row: np.ndarray
    rhs: float


class RobustMpcProblem:
    """Parametric robust QP for fixed (state set, input set, terminal set).

    Only the linear cost term and the right-hand sides depend on the measured
    state, so the matrix factorizations inside the QP backend are reused
    across time steps and rollouts.
    """

    def __init__(self, task, state_set: Polytope, input_set: Polytope, terminal: Polytope,
                 P_terminal: np.ndarray | None = None, settings: qp.AdmmSettings | None = None):
        box = task.W.as_box()
        if box is None:
            raise UnsupportedDisturbanceError("the MPC formulation needs a box-shaped disturbance set")
        self.w_center = 0.5 * (box[0] + box[1])
        self.w_radius = 0.5 * (box[1] - box[0])
        self.A, self.B = task.A, task.B
        self.n, self.m, self.N = task.n, task.m, task.N
        self.Q, self.R = task.Q_stage, task.R_stage
        self.x_ref = task.x_ref
        self.P_f = terminal_cost(task) if P_terminal is None else np.asarray(P_terminal, dtype=float)
        self.state_set, self.input_set, self.terminal = state_set, input_set, terminal
        self.settings = settings or qp.AdmmSettings()
        n, m, N = self.n, self.m, self.N
        self.pairs = [(k, l) for k in range(1, N) for l in range(k)]
        self.M_offset = {}
        off = N * m
        for pair in self.pairs:
            self.M_offset[pair] = off
            off += m * n
        self.n_var = off
        self.Apow = [np.eye(n)]
        for _ in range(N):
            self.Apow.append(self.Apow[-1] @ self.A)
        self._build_cost()
        self._build_constraints()
        self._warm: dict[int, qp.QpSolution] = {}

    # -- cost ----------------------------------------------------------
    def _nominal_map(self, k: int) -> np.ndarray:
        """``S_k`` with ``x_bar_k = A^k x + S_k theta``."""
        S = np.zeros((self.n, self.n_var))
        for j in range(k):
            S[:, j * self.m:(j + 1) * self.m] = self.Apow[k - 1 - j] @ self.B
        return S

    def _build_cost(self):
        n, m, N = self.n, self.m, self.N
        P = np.zeros((self.n_var, self.n_var))
        Gq = np.zeros((self.n_var, n))
        gq = np.zeros(self.n_var)
        self.S = [self._nominal_map(k) for k in range(N + 1)]
        for k in range(N + 1):
            W = self.P_f if k == N else self.Q
            S = self.S[k]
            P += 2 * S.T @ W @ S
            Gq += 2 * S.T @ W @ self.Apow[k]
            gq -= 2 * S.T @ W @ self.x_ref
        for k in range(N):
            P[k * m:(k + 1) * m, k * m:(k + 1) * m] += 2 * self.R
        P[N * m:, N * m:] += 2 * M_REGULARIZATION * np.eye(self.n_var - N * m)
        self.P = 0.5 * (P + P.T)
        self.Gq, self.gq = Gq, gq

    def cost_constant(self, x) -> float:
        total = 0.0
        for k in range(self.N + 1):
            W = self.P_f if k == self.N else self.Q
            d = self.Apow[k] @ x - self.x_ref
            total += float(d @ W @ d)
        return total

    # -- constraints ----------------------------------------------------
    def _robust_terms(self, c: _Constraint):
        """Affine pieces of one robust constraint.

        Returns ``(lin, ex, const, terms)`` meaning the constraint reads
        ``lin.theta + ex.x + const + sum r_i |F_i theta + c_i| <= rhs`` with
        ``terms = [(F_l, c_l)]`` per disturbance stage ``l``.
        """
        n, m = self.n, self.m
        lin = np.zeros(self.n_var)
        terms = []
        k = c.k
        if c.kind in ("state", "terminal"):
            h = c.row
            ex = h @ self.Apow[k]
            for j in range(k):
                lin[j * m:(j + 1) * m] += h @ self.Apow[k - 1 - j] @ self.B
            for l in range(k):
                cl = self.Apow[k - 1 - l].T @ h
                F = np.zeros((n, self.n_var))
                for j in range(l + 1, k):
                    g = self.B.T @ self.Apow[k - 1 - j].T @ h
                    off = self.M_offset[(j, l)]
                    for p in range(m):
                        F[np.arange(n), off + p * n + np.arange(n)] += g[p]
                terms.append((F, cl))
        else:
            e = c.row
            ex = np.zeros(n)
            lin[k * m:(k + 1) * m] += e
            for l in range(k):
                F = np.zeros((n, self.n_var))
                off = self.M_offset[(k, l)]
                for p in range(m):
                    F[np.arange(n), off + p * n + np.arange(n)] += e[p]
                terms.append((F, np.zeros(n)))
        const = 0.0
        for F, cl in terms:
            lin = lin + self.w_center @ F
            const += float(self.w_center @ cl)
        return lin, ex, const, terms

    def _build_constraints(self):
        cons = []
        for k in range(1, self.N):
            cons += [_Constraint("state", k, r, g) for r, g in zip(self.state_set.H, self.state_set.h)]
        cons += [_Constraint("terminal", self.N, r, g) for r, g in zip(self.terminal.H, self.terminal.h)]
        for k in range(self.N):
            for r, g in zip(self.input_set.H, self.input_set.h):
                cons.append(_Constraint("input", k, r, g))
        self.constraints = cons

        box_rows, box_u0, box_E = [], [], []
        cone_F, cone_w, cone_o, cone_b0, cone_E, sizes = [], [], [], [], [], []
        self.row_map = []  # (kind, index) per constraint
        for c in cons:
            lin, ex, const, terms = self._robust_terms(c)
            rhs0 = c.rhs - const
            F_rows, w_rows, o_rows = [], [], []
            for F, cl in terms:
                for i in range(self.n):
                    r = self.w_radius[i]
                    if r == 0.0:
                        continue
                    if not np.any(F[i]):
                        rhs0 -= r * abs(cl[i])
                        continue
                    F_rows.append(F[i])
                    w_rows.append(r)
                    o_rows.append(-cl[i])
            if F_rows:
                self.row_map.append(("cone", len(sizes)))
                sizes.append(len(F_rows))
                cone_F += F_rows
                cone_w += w_rows + [0.0]
                cone_o += o_rows + [0.0]
                cone_F.append(lin)
                cone_b0.append(rhs0)
                cone_E.append(ex)
            else:
                self.row_map.append(("box", len(box_rows)))
                box_rows.append(lin)
                box_u0.append(rhs0)
                box_E.append(ex)
        nb = len(box_rows)
        self.m_box = nb
        A_box = np.array(box_rows).reshape(nb, self.n_var)
        A_cone = np.array(cone_F).reshape(len(cone_F), self.n_var)
        self.Aqp = np.vstack([A_box, A_cone])
        self.box_u0 = np.array(box_u0, dtype=float)
        self.box_E = np.array(box_E).reshape(nb, self.n)
        self.cone_sizes = sizes
        self.cone_w = np.array(cone_w, dtype=float)
        self.cone_o = np.array(cone_o, dtype=float)
        self.cone_b0 = np.array(cone_b0, dtype=float)
        self.cone_E = np.array(cone_E).reshape(len(sizes), self.n)
        self.qp = qp.ConeQP(self.P, self.Aqp, nb, sizes, self.cone_w, self.cone_o, self.settings)

    # -- parametric data -------------------------------------------------
    def data(self, x):
        x = np.asarray(x, dtype=float)
        q = self.Gq @ x + self.gq
        u = self.box_u0 - self.box_E @ x
        l = np.full(self.m_box, -np.inf)
        b = self.cone_b0 - self.cone_E @ x
        return q, l, u, b

    def robust_lhs(self, x, theta) -> np.ndarray:
        """Worst-case left-hand side minus right-hand side of every constraint (<= 0 when feasible)."""
        x = np.asarray(x, dtype=float)
        theta = np.asarray(theta, dtype=float)
        out = np.empty(len(self.constraints))
        for idx, c in enumerate(self.constraints):
            lin, ex, const, terms = self._robust_terms(c)
            val = lin @ theta + ex @ x + const
            for F, cl in terms:
                val += float(self.w_radius @ np.abs(F @ theta + cl))
            out[idx] = val - c.rhs
        return out

    def decision(self, x, theta) -> MpcDecision:
        n, m, N = self.n, self.m, self.N
        v = theta[: N * m].reshape(N, m)
        M = np.zeros((N, N, m, n))
        for (k, l), off in self.M_offset.items():
            M[k, l] = theta[off:off + m * n].reshape(m, n)
        xs = np.array([self.Apow[k] @ x + self.S[k] @ theta for k in range(N + 1)])
        return MpcDecision(M=M, v=v, nominal_states=xs)

    # -- solving ----------------------------------------------------------
    def feasible(self, x) -> bool:
        """Exact feasibility check via an LP on the lifted formulation."""
        q, l, u, b = self.data(x)
        nv = self.n_var
        nt = len(self.cone_w) - len(self.cone_sizes)
        rows, rhs = [], []
        if self.m_box:
            rows.append(np.hstack([self.Aqp[: self.m_box], np.zeros((self.m_box, nt))]))
            rhs.append(u)
        t_idx = 0
        for c in range(len(self.cone_sizes)):
            rr, crow = self.qp.block_rows(c)
            F = self.Aqp[rr]
            w = self.qp.cone_w[rr]
            o = self.qp.cone_o[rr]
            k = len(rr)
            T = np.zeros((k, nt))
            T[np.arange(k), t_idx + np.arange(k)] = -1.0
            rows.append(np.hstack([F, T]))
            rhs.append(o)
            rows.append(np.hstack([-F, T]))
            rhs.append(-o)
            lin = np.zeros(nv + nt)
            lin[:nv] = self.Aqp[crow]
            lin[nv + t_idx: nv + t_idx + k] = w
            rows.append(lin[None, :])
            rhs.append([b[c]])
            t_idx += k
        if not rows:
            return True
        A_ub = np.vstack(rows)
        b_ub = np.concatenate([np.atleast_1d(r) for r in rhs])
        bounds = [(None, None)] * nv + [(0, None)] * nt
        res = linprog(np.zeros(nv + nt), A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
        return res.status == 0

    def solve(self, x, t: int | None = None, settings: qp.AdmmSettings | None = None):
        """Solve at measured state ``x``; returns ``(u, decision, report)``.

        ``t`` selects the warm-start slot (solutions at equal time indices of
        successive rollouts are usually close).
        """
        x = np.asarray(x, dtype=float)
        q, l, u, b = self.data(x)
        warm = self._warm.get(t)
        sol = self.qp.solve(q, l, u, b, warm=warm, settings=settings)
        if sol.report.status == qp.MAX_ITER and warm is not None:
            sol = self.qp.solve(q, l, u, b, settings=settings)
        rep = sol.report
        rep.objective = float(rep.objective + self.cost_constant(x)) if np.isfinite(rep.objective) else rep.objective
        if rep.status != qp.INFEASIBLE:
            self._warm[t] = sol
        dec = self.decision(x, sol.x)
        return dec.v[0].copy(), dec, rep

    def usable(self, report: qp.QpReport) -> bool:
        return report.status == qp.OPTIMAL or (
            report.status == qp.MAX_ITER and report.primal_residual <= ACCEPT_PRIMAL)

    def to_dict(self, x=None, decision: MpcDecision | None = None, report=None) -> dict:
        out = {
            "n_var": self.n_var,
            "P": self.P.tolist(),
            "A": self.Aqp.tolist(),
            "m_box": self.m_box,
            "block_sizes": list(self.cone_sizes),
            "block_weights": self.cone_w.tolist(),
            "block_shifts": self.cone_o.tolist(),
        }
        if x is not None:
            q, l, u, b = self.data(x)
            out.update({"x": np.asarray(x).tolist(), "q": q.tolist(),
                        "u": [float(v) for v in u], "b": b.tolist(),
                        "objective_constant": self.cost_constant(x)})
        if decision is not None:
            out["decision"] = decision.to_dict()
        if report is not None:
            out["report"] = report.to_dict()
        return out


def _key(P: Polytope) -> bytes:
    return P.H.tobytes() + b"|" + P.h.tobytes()


class MpcController:
    """Receding-horizon controller with problem caching.

    ``policy(estimate, terminal)`` returns a callable ``(x, t) -> u`` for
    :func:`iclmpc.system.rollout`.  Set ``dump_dir`` to write every solved
    QP as ``qp_<j>_<t>.json``.
    """

    def __init__(self, task, settings: qp.AdmmSettings | None = None, dump_dir=None, cache_size: int = 8):
        self.task = task
        self.settings = settings or qp.AdmmSettings()
        self.P_terminal = terminal_cost(task)
        self.dump_dir = dump_dir
        self.iteration = 0
        self._cache: dict[bytes, RobustMpcProblem] = {}
        self._cache_size = cache_size

    def problem(self, estimate, terminal: Polytope) -> RobustMpcProblem:
        X, U = _sets(estimate)
        U = self.task.U if U is None else U
        key = _key(X) + b"#" + _key(U) + b"#" + _key(terminal)
        prob = self._cache.get(key)
        if prob is None:
            prob = RobustMpcProblem(self.task, X, U, terminal, self.P_terminal, self.settings)
            if len(self._cache) >= self._cache_size:
                self._cache.pop(next(iter(self._cache)))
            self._cache[key] = prob
        return prob

    def feasible(self, estimate, terminal: Polytope, x=None) -> bool:
        if is_empty(terminal):
            return False
        x = self.task.x_S if x is None else x
        return self.problem(estimate, terminal).feasible(x)

    def policy(self, estimate, terminal: Polytope):
        prob = self.problem(estimate, terminal)
        j = self.iteration

        def act(x, t):
            u, dec, rep = prob.solve(x, t)
            if not prob.usable(rep):
                if rep.status != qp.INFEASIBLE and prob.feasible(x):
                    # retry from a cold start with a larger budget
                    s = qp.AdmmSettings(**{**self.settings.__dict__, "max_iter": 4 * self.settings.max_iter})
                    prob._warm.pop(t, None)
                    u, dec, rep = prob.solve(x, t, settings=s)
                if not prob.usable(rep):
                    raise ControlInfeasible(f"MPC problem not solved at t={t} ({rep.status})", t, rep)
            if self.dump_dir is not None:
                path = f"{self.dump_dir}/qp_{j}_{t}.json"
                with open(path, "w") as fh:
                    json.dump(prob.to_dict(x, dec, rep), fh)
            return u

        return act


def solve_step(task, x_t, estimate, terminal: Polytope, P_terminal=None,
               settings: qp.AdmmSettings | None = None):
    """One robust MPC solve; returns ``(u, decision, report)``."""
    X, U = _sets(estimate)
    U = task.U if U is None else U
    prob = RobustMpcProblem(task, X, U, terminal, P_terminal, settings)
    return prob.solve(x_t)
