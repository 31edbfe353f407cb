import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iclmpc import estimator as est
from iclmpc.geometry import Polytope
from iclmpc.rmpc import MpcController, terminal_set
from iclmpc.system import (ControlInfeasible, IterationRecord, TaskError,
                           UnsupportedDistributionError, classify_trajectory, rng_stream, rollout,
                           sample_disturbance, step, write_trajectory_csv)


def test_task_dimensions(task):
    assert (task.n, task.m) == (2, 1)
    assert task.Z_true_state.n_rows == 6
    assert np.max(np.abs(np.linalg.eigvals(task.A_cl))) < 1


@pytest.mark.parametrize("change, msg", [
    ({"N": 10}, "horizon"),
    ({"N": 12}, "horizon"),
    ({"R_stage": [[0.0]]}, "positive definite"),
    ({"Q_stage": [[-1.0, 0], [0, 1]]}, "semidefinite"),
    ({"K": [[0.0, 0.0]]}, "Schur"),
    ({"x_S": [0.0, 0.0, 0.0]}, "state vectors"),
])
def test_task_invariants_rejected(task, change, msg):
    with pytest.raises(TaskError, match=msg):
        task.with_(**change)


def test_task_origin_and_known_rows(task):
    with pytest.raises(TaskError, match="origin"):
        task.with_(Z_true_state=Polytope(np.vstack([task.Z_known_state.H, [[1, 0]]]),
                                         np.concatenate([task.Z_known_state.h, [-1]])))
    with pytest.raises(TaskError, match="subset"):
        task.with_(Z_known_state=Polytope.from_box([-10, -10], [10, 10]))
    with pytest.raises(TaskError, match="bounded"):
        task.with_(W=Polytope([[1, 0], [0, 1], [-1, 0]], [1, 1, 1]))


def test_task_roundtrip(task):
    t2 = type(task).from_dict(json.loads(json.dumps(task.to_dict())))
    assert np.array_equal(t2.K, task.K) and np.array_equal(t2.Z_true_state.H, task.Z_true_state.H)


def test_sample_disturbance_box(task):
    w = sample_disturbance(task.W, rng_stream(0, 9), size=1000)
    assert w.shape == (1000, 2) and np.all(np.abs(w) <= 0.5)
    zero = Polytope.from_box([0, 0], [0, 0])
    assert np.array_equal(sample_disturbance(zero, rng_stream(0)), [0, 0])


def test_sample_disturbance_moments(task):
    w = sample_disturbance(task.W, rng_stream(1), size=100_000)
    assert np.all(np.abs(w.mean(0)) < 0.01)
    assert np.max(np.abs(w)) <= 0.5
    # uniform on [-0.5, 0.5] has variance 1/12
    assert np.allclose(w.var(0), 1 / 12, atol=2e-3)


def test_sample_disturbance_non_box():
    tri = Polytope([[1, 0], [0, 1], [-1, -1]], [1, 1, 1])
    with pytest.raises(UnsupportedDistributionError):
        sample_disturbance(tri, rng_stream(0))


def test_step_examples(task):
    assert np.array_equal(step(task, [-15, 15], [0], [0, 0]), [0, 15])
    assert np.array_equal(step(task, [0, 0], [0], [0, 0]), [0, 0])
    assert np.array_equal(step(task, [0, 0], [1], [0.5, -0.5]), [0.5, 0.5])
    with pytest.raises(ValueError):
        step(task, [0, 0, 0], [0], [0, 0])


def test_classify_examples(task):
    assert classify_trajectory(task, np.zeros((3, 2))).all()
    assert classify_trajectory(task, [[0, 0], [6, 0]]).tolist() == [True, False]
    assert classify_trajectory(task, [[-15, 15]]).tolist() == [True]
    # absolute tolerance separates solver noise from violations
    assert classify_trajectory(task, [[5 + 5e-8, 0]]).tolist() == [True]
    assert classify_trajectory(task, [[5 + 1e-6, 0]]).tolist() == [False]


def _zero_policy(x, t):
    return np.zeros(1)


def test_rollout_shapes_and_reconstruction(task):
    short = task.with_(T=2, N=1)
    rec = rollout(short, _zero_policy, rng=rng_stream(0, 1))
    assert rec.states.shape == (3, 2) and rec.inputs.shape == (2, 1) and rec.disturbances.shape == (2, 2)
    rec = rollout(task, _zero_policy, rng=rng_stream(0, 2))
    recon = rec.states[1:] - rec.states[:-1] @ task.A.T - rec.inputs @ task.B.T
    assert np.max(np.abs(recon - rec.disturbances)) <= 1e-12


def test_rollout_determinism(task):
    ctl = MpcController(task)
    truth = est.ConstraintEstimate(task.Z_true_state, task.U, "true", 0)
    term = terminal_set(task, truth)
    a = rollout(task, ctl, truth, term, rng_stream(5, 1))
    b = rollout(task, MpcController(task), truth, term, rng_stream(5, 1))
    assert np.array_equal(a.states, b.states) and np.array_equal(a.inputs, b.inputs)


def test_rollout_abort_record(task):
    def policy(x, t):
        if t == 3:
            raise ControlInfeasible("no input", t)
        return np.zeros(1)
    rec = rollout(task, policy, rng=rng_stream(0))
    assert rec.aborted_at == 3 and len(rec.states) == 4 and not rec.success


def test_rollout_zero_disturbance_reaches_reference(task):
    nominal = task.with_(W=Polytope.from_box([0, 0], [0, 0]))
    truth = est.ConstraintEstimate(nominal.Z_true_state, nominal.U, "true", 0)
    rec = rollout(nominal, MpcController(nominal), truth, terminal_set(nominal, truth),
                  disturbances=np.zeros((nominal.T, 2)))
    assert rec.success
    assert np.linalg.norm(rec.states[-1] - nominal.x_ref) < 0.5


def test_rollout_true_set_no_failures(task):
    ctl = MpcController(task)
    truth = est.ConstraintEstimate(task.Z_true_state, task.U, "true", 0)
    term = terminal_set(task, truth)
    recs = [rollout(task, ctl, truth, term, rng_stream(11, i)) for i in range(20)]
    assert all(r.success for r in recs)


def test_record_roundtrip_and_csv(task, tmp_path):
    rec = rollout(task, _zero_policy, rng=rng_stream(0), j=4)
    back = IterationRecord.from_dict(json.loads(json.dumps(rec.to_dict())))
    assert np.array_equal(back.states, rec.states) and back.j == 4 and back.cost == rec.cost
    write_trajectory_csv([rec], tmp_path / "t.csv", 2, 1)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "j,t,x1,x2,u1,w1,w2,flag"
    assert len(lines) == 1 + task.T + 1
    assert lines[-1].split(",")[4:7] == ["", "", ""]


class _Poisoned(Polytope):
    """Raises on any access to its data."""

    @property
    def H(self):
        raise AssertionError("controller read the true constraints")

    @property
    def h(self):
        raise AssertionError("controller read the true constraints")


def test_oracle_isolation(task):
    truth = est.ConstraintEstimate(task.Z_true_state, task.U, "true", 0)
    term = terminal_set(task, truth)
    poisoned = task.with_()
    object.__setattr__(poisoned, "Z_true_state", _Poisoned(task.Z_true_state.H, task.Z_true_state.h))
    policy = MpcController(poisoned).policy(truth, term)
    x = poisoned.x_S
    w = sample_disturbance(task.W, rng_stream(3), size=task.T)
    for t in range(task.T):
        x = step(poisoned, x, policy(x, t), w[t])
    with pytest.raises(AssertionError):
        classify_trajectory(poisoned, [x])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_reconstruction_property(task, seed):
    rng = np.random.default_rng(seed)
    U = rng.uniform(-30, 30, (task.T, 1))
    rec = rollout(task, lambda x, t: U[t], rng=rng_stream(seed))
    recon = rec.states[1:] - rec.states[:-1] @ task.A.T - rec.inputs @ task.B.T
    assert np.max(np.abs(recon - rec.disturbances)) <= 1e-12 * max(1.0, np.max(np.abs(rec.states)))
    assert rec.success == bool(rec.flags.all())
