import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from clothspread.cloth import FeatureVector
from clothspread.control import (ConfigurationError, ControllerConfig, DeformationController, JacobianEstimate,
                                 LinearPlant, Outcome, TaskFunction, broyden_update, control_step, evaluate_task,
                                 pseudo_inverse, run_deformation_control, task_error)

import oracles

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def fv(values, d=2):
    values = np.asarray(values, dtype=float)
    return FeatureVector(values, d, len(values) // d)


# --- task function -------------------------------------------------------------------------------


def test_full_selection_is_identity():
    s = np.arange(8.0) / 10
    task = TaskFunction(tuple(range(8)), np.zeros(8))
    np.testing.assert_array_equal(evaluate_task(fv(s), task), s)


def test_feature_subset_selection():
    s = np.arange(8.0)
    task = TaskFunction.for_features([2, 3], 2, np.arange(8.0) + 100)
    assert task.m == 4
    np.testing.assert_array_equal(evaluate_task(fv(s), task), [2, 3, 4, 5])
    np.testing.assert_array_equal(task.target, [102, 103, 104, 105])
    S = task.selection_matrix(8)
    np.testing.assert_array_equal(S @ s, [2, 3, 4, 5])


@settings(max_examples=50, deadline=None)
@given(st.permutations(list(range(8))))
def test_permuting_selector_permutes_output(perm):
    s = np.linspace(-1, 1, 8)
    y = evaluate_task(fv(s), TaskFunction(tuple(range(8)), np.zeros(8)))
    yp = evaluate_task(fv(s), TaskFunction(tuple(perm), np.zeros(8)))
    np.testing.assert_array_equal(yp, y[list(perm)])


def test_task_configuration_errors():
    with pytest.raises(ConfigurationError):
        TaskFunction((0, 0), np.zeros(2))
    with pytest.raises(ConfigurationError):
        TaskFunction((0, 1), np.zeros(3))
    with pytest.raises(ConfigurationError):
        TaskFunction((-1,), np.zeros(1))
    with pytest.raises(ConfigurationError):
        evaluate_task(fv(np.zeros(4)), TaskFunction((0, 5), np.zeros(2)))


def test_task_error_examples():
    assert task_error(np.ones(8), np.ones(8)) == 0.0
    assert task_error(np.zeros(8), np.r_[0.3, 0.4, np.zeros(6)]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        task_error(np.zeros(3), np.zeros(4))


# --- Broyden update ------------------------------------------------------------------------------


def test_closed_form_rank_one_update():
    est = JacobianEstimate(np.zeros((2, 2)), alpha=1.0)
    out = broyden_update(est, [2.0, 3.0], [1.0, 0.0])
    np.testing.assert_array_equal(out.J_hat, [[2, 0], [3, 0]])
    assert out.step_index == 1


def test_axis_probes_recover_linear_map():
    rng = np.random.default_rng(11)
    J_true = rng.normal(size=(8, 3))
    est = JacobianEstimate.identity(8, 3, alpha=1.0)
    for e in np.eye(3):
        est = broyden_update(est, J_true @ e, e)
    assert np.linalg.norm(est.J_hat - J_true) < 1e-12


def test_small_steps_are_ignored():
    est = JacobianEstimate.identity(4, 2)
    out = broyden_update(est, np.ones(4), np.array([1e-6, 0.0]))
    assert out is est


def test_non_finite_increments_raise_fault():
    est = JacobianEstimate.identity(4, 2)
    out = broyden_update(est, [np.nan, 0, 0, 0], [0.1, 0.0])
    assert out.fault
    np.testing.assert_array_equal(out.J_hat, est.J_hat)
    assert out.step_index == est.step_index


def test_estimate_validation():
    with pytest.raises(ValueError):
        JacobianEstimate(np.eye(2), alpha=0.0)
    with pytest.raises(ValueError):
        JacobianEstimate(np.eye(2), alpha=1.5)
    with pytest.raises(ValueError):
        JacobianEstimate(np.array([[np.inf, 0], [0, 1]]))
    with pytest.raises(ValueError):
        broyden_update(JacobianEstimate(np.eye(2)), np.zeros(3), np.ones(2))


def test_initializations():
    np.testing.assert_array_equal(JacobianEstimate.identity(8, 3).J_hat, np.eye(8, 3))
    blocks = JacobianEstimate.feature_blocks(4, 2, 2).J_hat
    assert blocks.shape == (8, 2)
    np.testing.assert_array_equal(blocks, np.tile(np.eye(2), (4, 1)))


mats = arrays(np.float64, (8, 3), elements=finite)
vec3 = arrays(np.float64, 3, elements=finite)
vec8 = arrays(np.float64, 8, elements=finite)


@settings(max_examples=200, deadline=None)
@given(mats, vec8, vec3)
def test_secant_property(J, dy, dx):
    assume(np.linalg.norm(dx) > 1e-3)
    out = broyden_update(JacobianEstimate(J, alpha=1.0), dy, dx)
    scale = max(np.linalg.norm(dy), np.linalg.norm(J @ dx), 1.0)
    assert np.linalg.norm(out.J_hat @ dx - dy) <= 1e-12 * scale * 10


@settings(max_examples=200, deadline=None)
@given(mats, vec8, vec3, st.floats(0.01, 0.99))
def test_update_is_convex_combination(J, dy, dx, alpha):
    assume(np.linalg.norm(dx) > 1e-3)
    out = broyden_update(JacobianEstimate(J, alpha=alpha), dy, dx)
    expected = (1 - alpha) * (J @ dx) + alpha * dy
    scale = max(np.abs(dy).max(), np.abs(J @ dx).max(), 1.0)
    np.testing.assert_allclose(out.J_hat @ dx, expected, atol=1e-11 * scale)


@settings(max_examples=100, deadline=None)
@given(mats, vec3, st.floats(0.01, 1.0))
def test_zero_innovation_is_a_fixed_point(J, dx, alpha):
    assume(np.linalg.norm(dx) > 1e-3)
    out = broyden_update(JacobianEstimate(J, alpha=alpha), J @ dx, dx)
    np.testing.assert_allclose(out.J_hat, J, atol=1e-12 * max(1.0, np.abs(J).max()))


# --- control step --------------------------------------------------------------------------------


def test_spd_check():
    with pytest.raises(ValueError):
        ControllerConfig(K=np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        ControllerConfig(K=-np.eye(2))
    cfg = ControllerConfig.scalar_gain(3.5, 8)
    np.testing.assert_array_equal(cfg.K, 3.5 * np.eye(8))


def test_zero_error_gives_zero_command():
    est = JacobianEstimate.identity(8, 3)
    cmd = control_step(est, np.ones(8), ControllerConfig.scalar_gain(3.5, 8), np.ones(8))
    np.testing.assert_array_equal(cmd.u, np.zeros(3))


def test_identity_chain_passes_error_through():
    est = JacobianEstimate.identity(3, 3)
    e = np.array([0.01, -0.02, 0.005])
    cmd = control_step(est, np.zeros(3), ControllerConfig.scalar_gain(1.0, 3), e)
    np.testing.assert_allclose(cmd.u, e)
    assert not cmd.saturated and not cmd.degraded


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_tall_branch_solves_normal_equations(seed):
    rng = np.random.default_rng(seed)
    J = rng.normal(size=(8, 3))
    e = rng.normal(size=8) * 0.001
    cfg = ControllerConfig.scalar_gain(3.5, 8, ee_speed_cap=1e9)
    u = control_step(JacobianEstimate(J), np.zeros(8), cfg, e).u
    np.testing.assert_allclose(J.T @ J @ u, J.T @ (3.5 * e), atol=1e-9)
    np.testing.assert_allclose(u, oracles.least_squares(J, 3.5 * e), atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_wide_branch_is_minimum_norm(seed):
    rng = np.random.default_rng(seed)
    J = rng.normal(size=(2, 3))
    e = rng.normal(size=2) * 0.001
    cfg = ControllerConfig.scalar_gain(1.0, 2, ee_speed_cap=1e9)
    u = control_step(JacobianEstimate(J), np.zeros(2), cfg, e).u
    np.testing.assert_allclose(J @ u, e, atol=1e-9)
    null = np.linalg.svd(J)[2][-1]
    assert abs(null @ u) < 1e-9
    np.testing.assert_allclose(u, oracles.min_norm(J, e), atol=1e-9)


def test_rank_deficient_estimate_is_damped_and_flagged():
    J = np.zeros((8, 3))
    J[:, 0] = 1.0
    inv, degraded = pseudo_inverse(J)
    assert degraded and np.all(np.isfinite(inv))
    cmd = control_step(JacobianEstimate(J), np.zeros(8), ControllerConfig.scalar_gain(3.5, 8), np.full(8, 0.01))
    assert cmd.degraded
    assert np.all(np.isfinite(cmd.u))


@settings(max_examples=200, deadline=None)
@given(mats, vec8)
def test_command_is_finite_and_capped(J, e):
    cfg = ControllerConfig.scalar_gain(3.5, 8)
    cmd = control_step(JacobianEstimate(J), np.zeros(8), cfg, e)
    assert np.all(np.isfinite(cmd.u))
    assert np.linalg.norm(cmd.u) <= cfg.ee_speed_cap * (1 + 1e-12)


# --- closed loop ---------------------------------------------------------------------------------


def test_already_converged_start_stops_without_motion():
    J = np.random.default_rng(0).normal(size=(8, 3))
    plant = LinearPlant(J)
    task = TaskFunction(tuple(range(8)), np.zeros(8))
    cfg = ControllerConfig.scalar_gain(3.5, 8, convergence_hold=0.0)
    res = run_deformation_control(plant, task, cfg, JacobianEstimate.identity(8, 3))
    assert res.outcome is Outcome.CONVERGED
    assert len(res.records) == 1
    np.testing.assert_array_equal(plant.x, np.zeros(3))


def test_known_jacobian_gives_monotone_descent():
    rng = np.random.default_rng(5)
    J = rng.normal(size=(8, 3))
    x_star = rng.uniform(-0.1, 0.1, 3)
    plant = LinearPlant(J)
    task = TaskFunction(tuple(range(8)), J @ x_star)
    cfg = ControllerConfig.scalar_gain(3.5, 8, convergence_threshold=1e-6, convergence_hold=0.0, max_duration=20)
    # alpha update on an exact, noiseless plant keeps J_hat = J_true.
    res = run_deformation_control(plant, task, cfg, JacobianEstimate(J, alpha=0.1))
    assert res.outcome is Outcome.CONVERGED
    assert np.all(np.diff(res.errors) <= 1e-15)


def test_timeout_outcome():
    plant = LinearPlant(np.eye(2))
    task = TaskFunction((0, 1), np.array([10.0, 10.0]))
    cfg = ControllerConfig.scalar_gain(1.0, 2, max_duration=0.5)
    res = run_deformation_control(plant, task, cfg, JacobianEstimate.identity(2, 2))
    assert res.outcome is Outcome.TIMEOUT
    assert res.records[-1].sim_time == pytest.approx(0.5, abs=plant.period)


def test_grasp_loss_aborts():
    class Dropping(LinearPlant):
        def grasped(self):
            return self.tick_index < 3

    plant = Dropping(np.eye(2))
    res = run_deformation_control(plant, TaskFunction((0, 1), np.ones(2)), ControllerConfig.scalar_gain(1.0, 2),
                                  JacobianEstimate.identity(2, 2))
    assert res.outcome is Outcome.GRASP_LOST
    assert len(res.records) == 3


def test_convergence_needs_the_hold_period():
    plant = LinearPlant(np.eye(2))
    task = TaskFunction((0, 1), np.array([0.001, 0.0]))
    cfg = ControllerConfig.scalar_gain(1.0, 2, convergence_threshold=0.01, convergence_hold=1.0)
    res = run_deformation_control(plant, task, cfg, JacobianEstimate.identity(2, 2))
    assert res.outcome is Outcome.CONVERGED
    assert res.records[-1].sim_time - res.convergence_time == pytest.approx(1.0, abs=plant.period)


def test_controller_logs_every_tick():
    ctrl = DeformationController(TaskFunction((0, 1), np.ones(2)), ControllerConfig.scalar_gain(1.0, 2),
                                 JacobianEstimate.identity(2, 2))
    ctrl.tick(fv([0.0, 0.0]), np.zeros(2), 0.0)
    ctrl.tick(fv([0.01, 0.0]), np.array([0.01, 0.0]), 1 / 30)
    r = ctrl.records[-1]
    assert r.step_index == 1 and r.update_accepted
    assert r.dx_norm == pytest.approx(0.01)
    assert r.task_error == pytest.approx(np.hypot(0.99, 1.0))
    with pytest.raises(ValueError):
        DeformationController(TaskFunction((0, 1), np.ones(2)), ControllerConfig.scalar_gain(1.0, 2),
                              JacobianEstimate.identity(3, 2))
