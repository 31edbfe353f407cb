"""Pure NumPy ADMM iteration loop, used when the compiled kernel is absent.

Same signature and semantics as ``iclmpc._admm.admm_run``:

* ``P`` dense cost Hessian, ``A`` given twice in CSR form (``Ap/Ai/Ax`` for
  ``A`` and ``ATp/ATi/ATx`` for its transpose).
* ``L`` lower Cholesky factor of ``P + sigma I + A' diag(rho) A``.
* rows ``[0, m_box)`` are interval rows ``l <= z <= u``; the remaining rows form
  consecutive blocks delimited by ``cone_ptr``.  Block ``c`` encodes
  ``sum_i w_i |z_i - o_i| + z_last <= b_c``.
* ``x, z, y`` are updated in place; ``dy`` receives the last dual increment.

Returns ``(iters, status, r_prim, r_dual, |Ax|, |z|, |Px|, |A'y|, |q|)`` with
``status == 0`` on convergence and ``1`` when ``max_iter`` was exhausted.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular
from scipy.sparse import csr_matrix


class _Blocks:
    """Cone blocks grouped by width so projections vectorise."""

    def __init__(self, m_box, cone_ptr, w, o):
        self.groups = []
        widths = np.diff(cone_ptr) - 1
        for width in np.unique(widths):
            sel = np.flatnonzero(widths == width)
            start = m_box + cone_ptr[sel]
            rows = start[:, None] + np.arange(width)[None, :]
            crow = start + width
            ww = w[rows]
            self.groups.append((sel, rows, crow, ww, o[rows]))


def project_epigraph(a0, w, s0):
    """Project rows of ``(a0, s0)`` onto ``{(a, s): sum_i w_i |a_i| <= s}``.

    ``a0`` and ``w`` have shape ``(B, k)``; ``s0`` has shape ``(B,)``.
    """
    absa = np.abs(a0)
    wa = w * absa
    out_a = a0.copy()
    out_s = s0.copy()
    need = wa.sum(axis=1) > s0
    if not np.any(need):
        return out_a, out_s
    absa, w, wa, s = absa[need], w[need], wa[need], s0[need]
    with np.errstate(divide="ignore", invalid="ignore"):
        key = np.where(w > 0, absa / w, -np.inf)
    order = np.argsort(-key, axis=1)
    key_s = np.take_along_axis(key, order, axis=1)
    cwa = np.cumsum(np.take_along_axis(wa, order, axis=1), axis=1)
    cw2 = np.cumsum(np.take_along_axis(w * w, order, axis=1), axis=1)
    B, k = key.shape
    zero = np.zeros((B, 1))
    cwa = np.hstack([zero, cwa])
    cw2 = np.hstack([zero, cw2])
    lam = (cwa - s[:, None]) / (1.0 + cw2)
    lower = np.maximum(np.hstack([key_s, zero]), 0.0)
    ok = lam >= lower
    # the last candidate always satisfies lam >= 0 once every breakpoint is passed
    ok[:, -1] = True
    pick = np.argmax(ok, axis=1)
    lam = np.maximum(lam[np.arange(B), pick], 0.0)
    shrunk = np.maximum(absa - lam[:, None] * w, 0.0)
    a_new = np.where(w > 0, np.sign(a0[need]) * shrunk, a0[need])
    out_a[need] = a_new
    out_s[need] = s + lam
    return out_a, out_s


def project(z, l, u, m_box, blocks: _Blocks, b):
    z[:m_box] = np.clip(z[:m_box], l, u)
    for sel, rows, crow, w, o in blocks.groups:
        a0 = z[rows] - o
        s0 = b[sel] - z[crow]
        a, s = project_epigraph(a0, w, s0)
        z[rows] = a + o
        z[crow] = b[sel] - s


def admm_run(P, Ap, Ai, Ax, ATp, ATi, ATx, L, q, l, u, rho, sigma, alpha,
             m_box, cone_ptr, cone_w, cone_o, cone_b, x, z, y, dy,
             max_iter, check_every, eps_abs, eps_rel):
    n, m = x.shape[0], z.shape[0]
    A = csr_matrix((Ax, Ai, Ap), shape=(m, n))
    AT = csr_matrix((ATx, ATi, ATp), shape=(n, m))
    blocks = _Blocks(m_box, np.asarray(cone_ptr), np.asarray(cone_w), np.asarray(cone_o))
    l, u = np.asarray(l)[:m_box], np.asarray(u)[:m_box]
    b = np.asarray(cone_b)
    q = np.asarray(q)
    n_q = float(np.max(np.abs(q))) if n else 0.0
    r_prim = r_dual = np.inf
    n_ax = n_z = n_px = n_aty = 0.0
    status = 1
    it = 0
    while it < max_iter:
        rhs = AT @ (rho * z - y) + sigma * x - q
        xt = solve_triangular(L, solve_triangular(L, rhs, lower=True, check_finite=False),
                              lower=True, trans="T", check_finite=False)
        zt = A @ xt
        x[:] = alpha * xt + (1.0 - alpha) * x
        zr = alpha * zt + (1.0 - alpha) * z
        znew = zr + y / rho
        project(znew, l, u, m_box, blocks, b)
        ynew = y + rho * (zr - znew)
        dy[:] = ynew - y
        y[:] = ynew
        z[:] = znew
        it += 1
        if it % check_every == 0 or it == max_iter:
            ax = A @ x
            aty = AT @ y
            px = P @ x
            r_prim = float(np.max(np.abs(ax - z))) if m else 0.0
            r_dual = float(np.max(np.abs(px + q + aty)))
            n_ax = float(np.max(np.abs(ax))) if m else 0.0
            n_z = float(np.max(np.abs(z))) if m else 0.0
            n_px = float(np.max(np.abs(px)))
            n_aty = float(np.max(np.abs(aty)))
            e_prim = eps_abs + eps_rel * max(n_ax, n_z)
            e_dual = eps_abs + eps_rel * max(n_px, n_aty, n_q)
            if r_prim <= e_prim and r_dual <= e_dual:
                status = 0
                break
    return it, status, r_prim, r_dual, n_ax, n_z, n_px, n_aty, n_q
