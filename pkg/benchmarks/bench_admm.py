"""Compare the compiled ADMM kernel with the NumPy fallback.

Solves the robust MPC QP of the builtin scenario at its start state and an
SVM dual QP on random data, with polishing off so both backends run the same
number of ADMM iterations.  Usage::

    python benchmarks/bench_admm.py [--repeat 5]
"""
import argparse
import time

import numpy as np

from iclmpc import qp
from iclmpc.harness import load_scenario
from iclmpc.rmpc import MpcController, terminal_set
from iclmpc.svm import rbf


def _mpc_case():
    task = load_scenario("sec5").task
    term = terminal_set(task, task.Z_true_state)
    prob = MpcController(task).problem(task.Z_true_state, term)
    q, l, u, b = prob.data(task.x_S)
    return "mpc", prob.qp, (q, l, u, b)


def _svm_case(n=200, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-20, 20, (n, 2))
    y = np.where(X[:, 0] + X[:, 1] <= 5, 1.0, -1.0)
    K = rbf(X, X, 0.005)
    A = np.vstack([np.eye(n), y[None, :]])
    prob = qp.ConeQP((y[:, None] * y[None, :]) * K, A, m_box=n + 1)
    lo = np.zeros(n + 1)
    hi = np.concatenate([np.full(n, 100.0), [0.0]])
    return "svm", prob, (-np.ones(n), lo, hi, None)


def bench(repeat):
    rows = []
    for name, prob, (q, l, u, b) in (_mpc_case(), _svm_case()):
        ref = None
        for backend in sorted(qp.BACKENDS):
            s = qp.AdmmSettings(backend=backend, polish=False, max_iter=200_000)
            times = []
            for _ in range(repeat):
                t0 = time.perf_counter()
                sol = prob.solve(q, l, u, b, settings=s)
                times.append(time.perf_counter() - t0)
            ref = sol.x if ref is None else ref
            rows.append((name, backend, sol.report.iterations, np.median(times) * 1e3,
                         float(np.max(np.abs(sol.x - ref)))))
    return rows


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    a = ap.parse_args()
    print(f"{'problem':8s} {'backend':9s} {'iters':>7s} {'ms':>10s} {'max|dx|':>10s}")
    rows = bench(a.repeat)
    for name, backend, it, ms, dx in rows:
        print(f"{name:8s} {backend:9s} {it:7d} {ms:10.2f} {dx:10.2e}")
    by = {(r[0], r[1]): r[3] for r in rows}
    for name in ("mpc", "svm"):
        if (name, "compiled") in by:
            print(f"{name}: speedup {by[name, 'python'] / by[name, 'compiled']:.1f}x")


if __name__ == "__main__":
    main()
