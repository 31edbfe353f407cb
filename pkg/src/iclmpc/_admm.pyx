# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled ADMM iteration loop.

Mirrors ``iclmpc._admm_py.admm_run`` exactly; see that module for the meaning
of each argument.  Constraint rows are either interval rows ``l <= a.x <= u``
or blocks describing ``sum_i w_i |z_i - o_i| + z_c <= b`` (the last row of each
block is the ``z_c`` row).
"""
import numpy as np
from libc.math cimport fabs, INFINITY


cdef inline double _dmax(double a, double b) nogil:
    return a if a > b else b


cdef void _project_epigraph(double[::1] z, Py_ssize_t r0, Py_ssize_t r1,
                            const double[::1] w, const double[::1] o, double b,
                            double[::1] tkey, double[::1] twa, double[::1] tw2) noexcept nogil:
    # rows r0..r1-1 are the absolute-value part, row r1 is the linear part
    cdef Py_ssize_t i, j, k, cnt = 0
    cdef double s0 = b - z[r1]
    cdef double nrm = 0.0, a, lam, lower, swa = 0.0, sw2 = 0.0
    cdef double key, va
    for i in range(r0, r1):
        nrm += w[i] * fabs(z[i] - o[i])
    if nrm <= s0:
        return
    for i in range(r0, r1):
        if w[i] > 0.0:
            a = fabs(z[i] - o[i])
            key = a / w[i]
            # insertion sort, descending by breakpoint
            j = cnt
            while j > 0 and tkey[j - 1] < key:
                tkey[j] = tkey[j - 1]
                twa[j] = twa[j - 1]
                tw2[j] = tw2[j - 1]
                j -= 1
            tkey[j] = key
            twa[j] = w[i] * a
            tw2[j] = w[i] * w[i]
            cnt += 1
    lam = -s0
    for k in range(cnt + 1):
        lam = (swa - s0) / (1.0 + sw2)
        lower = tkey[k] if k < cnt else 0.0
        if lower < 0.0:
            lower = 0.0
        if lam >= lower:
            break
        swa += twa[k]
        sw2 += tw2[k]
    if lam < 0.0:
        lam = 0.0
    for i in range(r0, r1):
        if w[i] > 0.0:
            a = z[i] - o[i]
            va = fabs(a) - lam * w[i]
            if va <= 0.0:
                z[i] = o[i]
            elif a > 0.0:
                z[i] = o[i] + va
            else:
                z[i] = o[i] - va
    z[r1] = b - (s0 + lam)


cdef void _chol_solve(const double[:, ::1] L, double[::1] x, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double s
    for i in range(n):
        s = x[i]
        for j in range(i):
            s -= L[i, j] * x[j]
        x[i] = s / L[i, i]
    for i in range(n - 1, -1, -1):
        s = x[i]
        for j in range(i + 1, n):
            s -= L[j, i] * x[j]
        x[i] = s / L[i, i]


cdef void _csr_matvec(const int[::1] ptr, const int[::1] idx, const double[::1] val,
                      const double[::1] x, double[::1] out, Py_ssize_t rows) noexcept nogil:
    cdef Py_ssize_t i, k
    cdef double s
    for i in range(rows):
        s = 0.0
        for k in range(ptr[i], ptr[i + 1]):
            s += val[k] * x[idx[k]]
        out[i] = s


def admm_run(const double[:, ::1] P,
             const int[::1] Ap, const int[::1] Ai, const double[::1] Ax,
             const int[::1] ATp, const int[::1] ATi, const double[::1] ATx,
             const double[:, ::1] L,
             const double[::1] q, const double[::1] l, const double[::1] u,
             const double[::1] rho, double sigma, double alpha,
             Py_ssize_t m_box, const int[::1] cone_ptr,
             const double[::1] cone_w, const double[::1] cone_o, const double[::1] cone_b,
             double[::1] x, double[::1] z, double[::1] y, double[::1] dy,
             Py_ssize_t max_iter, Py_ssize_t check_every,
             double eps_abs, double eps_rel):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t m = z.shape[0]
    cdef Py_ssize_t n_cones = cone_ptr.shape[0] - 1
    cdef Py_ssize_t it, i, j, c, r0, r1, width = 1
    cdef double zr, v, yold
    cdef double r_prim = INFINITY, r_dual = INFINITY
    cdef double n_ax = 0.0, n_z = 0.0, n_px = 0.0, n_aty = 0.0, n_q = 0.0
    cdef double e_prim, e_dual
    cdef int status = 1

    for c in range(n_cones):
        if cone_ptr[c + 1] - cone_ptr[c] > width:
            width = cone_ptr[c + 1] - cone_ptr[c]

    cdef double[::1] rhs = x.copy()
    cdef double[::1] tmp = z.copy()
    cdef double[::1] zt = z.copy()
    cdef double[::1] tkey = np.empty(width + 1)
    cdef double[::1] twa = np.empty(width + 1)
    cdef double[::1] tw2 = np.empty(width + 1)

    for i in range(n):
        n_q = _dmax(n_q, fabs(q[i]))

    it = 0
    with nogil:
        while it < max_iter:
            # x-update: (P + sigma I + A' R A) xt = sigma x - q + A'(rho z - y)
            for i in range(m):
                tmp[i] = rho[i] * z[i] - y[i]
            _csr_matvec(ATp, ATi, ATx, tmp, rhs, n)
            for i in range(n):
                rhs[i] = rhs[i] + sigma * x[i] - q[i]
            _chol_solve(L, rhs, n)
            _csr_matvec(Ap, Ai, Ax, rhs, zt, m)
            for i in range(n):
                x[i] = alpha * rhs[i] + (1.0 - alpha) * x[i]
            # z- and y-updates
            for i in range(m):
                zr = alpha * zt[i] + (1.0 - alpha) * z[i]
                tmp[i] = zr
                z[i] = zr + y[i] / rho[i]
            for i in range(m_box):
                v = z[i]
                if v < l[i]:
                    v = l[i]
                elif v > u[i]:
                    v = u[i]
                z[i] = v
            for c in range(n_cones):
                r0 = m_box + cone_ptr[c]
                r1 = m_box + cone_ptr[c + 1] - 1
                _project_epigraph(z, r0, r1, cone_w, cone_o, cone_b[c], tkey, twa, tw2)
            for i in range(m):
                yold = y[i]
                y[i] = yold + rho[i] * (tmp[i] - z[i])
                dy[i] = y[i] - yold
            it += 1

            if it % check_every == 0 or it == max_iter:
                # primal residual ||Ax - z||, dual residual ||Px + q + A'y||
                _csr_matvec(Ap, Ai, Ax, x, zt, m)
                r_prim = 0.0
                n_ax = 0.0
                n_z = 0.0
                for i in range(m):
                    r_prim = _dmax(r_prim, fabs(zt[i] - z[i]))
                    n_ax = _dmax(n_ax, fabs(zt[i]))
                    n_z = _dmax(n_z, fabs(z[i]))
                _csr_matvec(ATp, ATi, ATx, y, rhs, n)
                r_dual = 0.0
                n_px = 0.0
                n_aty = 0.0
                for i in range(n):
                    v = 0.0
                    for j in range(n):
                        v += P[i, j] * x[j]
                    n_px = _dmax(n_px, fabs(v))
                    n_aty = _dmax(n_aty, fabs(rhs[i]))
                    r_dual = _dmax(r_dual, fabs(v + q[i] + rhs[i]))
                e_prim = eps_abs + eps_rel * _dmax(n_ax, n_z)
                e_dual = eps_abs + eps_rel * _dmax(n_px, _dmax(n_aty, n_q))
                if r_prim <= e_prim and r_dual <= e_dual:
                    status = 0
                    break
    return it, status, r_prim, r_dual, n_ax, n_z, n_px, n_aty, n_q
