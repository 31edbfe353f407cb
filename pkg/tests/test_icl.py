from dataclasses import replace

import numpy as np
import pytest

from iclmpc import estimator as est
from iclmpc.geometry import Polytope, contains, vertices
from iclmpc.icl import IclConfig, run, warm_start
from iclmpc.rmpc import MpcController, lqr_gain
from iclmpc.system import LtiTask, rng_stream, rollout

ROBUST_SEED = 20  # a master seed whose warm start surrounds the origin (see the decision ledger)


def _stable_task():
    A, B = 0.5 * np.eye(2), np.eye(2)
    Z = Polytope.from_box([-5, -5], [5, 5])
    return LtiTask(A=A, B=B, W=Polytope.from_box([-0.1] * 2, [0.1] * 2), Z_true_state=Z, Z_known_state=Z,
                   U=Polytope.from_box([-2, -2], [2, 2]), x_S=[1.0, 1.0], x_ref=[0.0, 0.0], T=8, N=3,
                   Q_stage=np.eye(2), R_stage=np.eye(2), K=lqr_gain(A, B, np.eye(2), np.eye(2)))


def test_warm_start_shape(task):
    recs = warm_start(task, 2, 0)
    assert len(recs) == 2
    assert sum(len(r.states) for r in recs) == 22
    assert all(r.kind == "warm" and r.j < 0 for r in recs)
    assert all(np.all(np.abs(r.inputs) <= 30) for r in recs)
    assert all(np.allclose(r.states[0], task.x_S) for r in recs)


def test_warm_start_zero_input(task):
    t = task.with_(U=Polytope.from_box([0.0], [0.0]))
    rec = warm_start(t, 1, 3)[0]
    assert np.all(rec.inputs == 0)
    x = np.asarray(task.x_S, dtype=float)
    for k, w in enumerate(rec.disturbances):
        x = task.A @ x + w
        assert np.allclose(rec.states[k + 1], x)


def test_warm_start_rejects_zero():
    with pytest.raises(ValueError):
        warm_start(_stable_task(), 0, 0)


def test_fully_known_robust_terminates():
    t = _stable_task()
    state, records = run(t, est.ROBUST, IclConfig(mode=est.ROBUST), 0)
    assert state.status == "certified"
    assert state.estimate.method == est.CVX
    V = vertices(state.estimate.state_set)
    assert np.all(V @ t.Z_true_state.H.T <= t.Z_true_state.h + 1e-9)
    assert state.certificate.j_bar == state.j


def test_unknown_mode_rejected(task):
    with pytest.raises(ValueError):
        run(task, "other")


@pytest.fixture(scope="module")
def prob_run(scenario):
    cfg = replace(scenario.icl_config(), epsilon=0.5, beta=0.01)
    return run(scenario.task, est.PROBABILISTIC, cfg, 0)


def test_probabilistic_terminates_with_valid_certificate(prob_run):
    state, records = prob_run
    cert = state.certificate
    assert state.status == "certified" and cert.closed
    assert cert.N_it == est.required_successes(0.5, 0.01) == 7
    tail = records[-cert.N_it:]
    assert len(tail) == cert.N_it and all(r.success for r in tail)
    frozen = state.estimates[tail[0].j]
    assert all(state.estimates[r.j].same_set(frozen) for r in tail)
    assert frozen.same_set(state.estimate)
    assert cert.j_bar == tail[0].j


def test_warm_records_excluded(prob_run):
    state, records = prob_run
    assert all(r.kind == "mpc" and r.j >= 1 for r in records)
    assert len(state.warm_records) == 2


def test_run_is_deterministic(scenario):
    cfg = replace(scenario.icl_config(), max_iterations=3)
    a, ra = run(scenario.task, scenario.mode, cfg, 4)
    b, rb = run(scenario.task, scenario.mode, cfg, 4)
    assert a.summary() == b.summary()
    for x, y in zip(ra, rb):
        assert np.array_equal(x.states, y.states)
    assert a.estimate.same_set(b.estimate)


def test_iteration_cap(scenario):
    cfg = replace(scenario.icl_config(), max_iterations=1, epsilon=0.01, beta=0.01)
    state, records = run(scenario.task, est.PROBABILISTIC, cfg, 1)
    assert state.status == "open" and not state.certificate.closed and len(records) == 1
    assert any("cap" in d for d in state.diagnostics)


@pytest.mark.slow
def test_robust_run_continuation(scenario):
    cfg = replace(scenario.icl_config(), mode=est.ROBUST)
    state, records = run(scenario.task, est.ROBUST, cfg, ROBUST_SEED)
    assert state.status == "certified" and state.estimate.method == est.CVX
    hull = state.estimate.state_set
    Z = scenario.task.Z_true_state
    assert np.all(vertices(hull) @ Z.H.T <= Z.h + 1e-9)
    ctl = MpcController(scenario.task)
    for i in range(50):
        rec = rollout(scenario.task, ctl, state.estimate, state.terminal, rng_stream(ROBUST_SEED, 9, i))
        assert rec.success and rec.aborted_at is None
        assert np.all(contains(hull, rec.states, tol=1e-7))
