from __future__ import annotations

import math

import numpy as np
import pytest

from adadelay.core import DelayedGradientMessage, SparseVector
from adadelay.delay import TraceDelay, UniformDelay
from adadelay.engine import CausalityError, HistoryError, Server, default_history, run, run_batch
from adadelay.problems import L2Ball, QuadraticProblem, make_synthetic
from adadelay.stepsize import AdaDelayScalar, AsyncAdaGrad, make_policy


def _one_dim():
    return QuadraticProblem(np.array([1.0]), np.array([1.0]))


def test_single_step_hand_example():
    prob = _one_dim()
    rec = run(prob, AdaDelayScalar(c=1.0), UniformDelay(0), 1, record_trajectory=True)
    # g = -1, eta = 1, alpha = 1/2
    assert rec.trajectory["x"][1].tolist() == [0.5]
    assert rec.eta.tolist() == [1.0] and rec.alpha.tolist() == [0.5]
    assert rec.f_gap.tolist() == [0.125]
    assert rec.x_bar.tolist() == [0.5] and rec.final_gap == 0.125


def test_projection_applied_at_the_boundary():
    prob = QuadraticProblem(np.array([1.0, 1.0]), np.array([10.0, 0.0]), domain=L2Ball(1.0))
    server = Server(np.zeros(2), AdaDelayScalar(c=1.0, alpha0=10.0), prob.domain)
    server.apply_gradient(prob.gradient(server.x), 1)
    assert server.x.tolist() == [1.0, 0.0]


def test_server_causality_and_history_errors():
    s = Server(np.zeros(2), AdaDelayScalar(), history=2)
    with pytest.raises(CausalityError):
        s.apply_gradient(np.ones(2), 2)
    for _ in range(3):
        s.apply_gradient(np.ones(2), s.t)
    assert s.t == 4
    s.iterate_at(3)
    with pytest.raises(HistoryError):
        s.iterate_at(2)
    with pytest.raises(CausalityError):
        s.iterate_at(5)


def test_averaged_iterate_examples():
    s = Server(np.zeros(1), AdaDelayScalar(c=1.0))
    with pytest.raises(ValueError):
        s.averaged_iterate()
    xs = []
    for _ in range(3):
        s.apply_update(DelayedGradientMessage(np.array([-1.0]), s.t))
        xs.append(s.x[0])
    assert math.isclose(s.averaged_iterate()[0], sum(xs) / 3)


def test_sparse_gradient_touches_only_its_support():
    s = Server(np.ones(4), AsyncAdaGrad(4))
    s.apply_gradient(SparseVector([1, 3], [2.0, -2.0], 4), 1)
    # eta = |g| = 2, alpha = 1 / 3
    assert np.allclose(s.x, [1.0, 1 - 2 / 3, 1.0, 1 + 2 / 3])


def test_default_history():
    assert default_history(UniformDelay(5), None) == 11
    assert default_history(UniformDelay(5), None, T=3) == 4
    assert default_history(UniformDelay(5), 7) == 7
    assert default_history(None, None) == 4096


def test_run_reads_lagged_iterates_from_trace():
    prob = _one_dim()
    delays = [0, 1, 2, 0, 3]
    rec = run(prob, AdaDelayScalar(c=1.0), TraceDelay(delays), 5, record_trajectory=True)
    assert rec.tau.tolist() == delays
    x = rec.trajectory["x"][:, 0]
    for t in range(1, 6):
        src = t - delays[t - 1]
        alpha = 1.0 / (1.0 + math.sqrt(t + delays[t - 1]))
        assert x[t] == x[t - 1] - alpha * (x[src - 1] - 1.0)


def test_run_is_deterministic_and_seed_sensitive():
    prob, _, _ = make_synthetic(5, sigma=1.0, R=3.0)
    a = run(prob, AdaDelayScalar(c=2.0), UniformDelay(3), 200, seed=11)
    b = run(prob, AdaDelayScalar(c=2.0), UniformDelay(3), 200, seed=11)
    c = run(prob, AdaDelayScalar(c=2.0), UniformDelay(3), 200, seed=12)
    assert np.array_equal(a.tau, b.tau) and a.final_gap == b.final_gap
    assert not np.array_equal(a.tau, c.tau)


def test_run_batch_reproduces_single_runs():
    prob, _, _ = make_synthetic(6, sigma=1.0, R=3.0, seed=2)
    pol = AdaDelayScalar(c=3.0)
    seeds = [0, 5, 9]
    batch = run_batch(prob, pol, UniformDelay(4), 700, seeds, checkpoints=[100, 700], record_trajectory=True)
    for i, s in enumerate(seeds):
        rec = run(prob, pol, UniformDelay(4), 700, seed=s, record_trajectory=True, gap_every=1)
        assert np.array_equal(batch.trajectory["x"][i], rec.trajectory["x"])
        assert np.array_equal(batch.taus[i], rec.tau)
        assert batch.avg_gap[i, -1] == rec.final_gap
        assert batch.last_gap[i, -1] == rec.last_gap
        assert math.isclose(batch.regret[i, -1], float(np.sum(rec.f_gap)), rel_tol=1e-12)


def test_run_batch_regret_matches_recomputed_gaps():
    prob, _, _ = make_synthetic(4, sigma=0.5, R=3.0)
    batch = run_batch(prob, AdaDelayScalar(c=1.0), UniformDelay(2), 300, [1, 2], checkpoints=[50, 300],
                      record_trajectory=True)
    x = batch.trajectory["x"]
    gaps = np.array([[prob.value(x[s, t]) for t in range(1, 301)] for s in range(2)])
    assert np.allclose(batch.regret[:, 0], gaps[:, :50].sum(axis=1), rtol=1e-12)
    assert np.allclose(batch.regret[:, 1], gaps.sum(axis=1), rtol=1e-12)


def test_run_batch_rejects_unsupported_inputs():
    prob, _, _ = make_synthetic(4, sigma=0.5, R=3.0)
    with pytest.raises(TypeError):
        run_batch(prob, AsyncAdaGrad(4), UniformDelay(1), 10, [0])
    with pytest.raises(ValueError):
        run_batch(prob, AdaDelayScalar(), UniformDelay(1), 10, [0], checkpoints=[11])


def test_run_with_zero_steps():
    prob, _, _ = make_synthetic(3, sigma=0.0, R=3.0)
    rec = run(prob, AdaDelayScalar(), UniformDelay(1), 0)
    assert rec.T == 0 and math.isnan(rec.final_gap)


@pytest.mark.parametrize("kind", ["adadelay_coord", "async_adagrad", "adaptive_revision"])
def test_coordinate_policies_run_on_logistic(kind, small_logistic):
    pol = make_policy(kind, small_logistic.dim, alpha0=0.5)
    rec = run(small_logistic, pol, UniformDelay(3), 400, seed=1, gap_every=100, f_star=0.0)
    assert np.all(np.isfinite(rec.eta)) and np.isfinite(rec.last_gap)
    server = rec.extra["server"]
    assert server.state_element_count() == {"adadelay_coord": 2, "async_adagrad": 2,
                                            "adaptive_revision": 4}[kind] * small_logistic.dim
