import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clothspread.kinematics import (HOME_JOINTS, ArmModel, BasePlan, KinematicsState, UnreachableError,
                                    advance_base, apply_joint_velocities, forward_kinematics, ik_velocity,
                                    inflate, manipulator_jacobian, plan_base_path, point_in_rect,
                                    segment_hits_rect, standing_position_for)

import oracles

ARM = ArmModel.default()
TABLE = (0.0, 0.0, 0.8, 0.9)

# Frozen from the scipy-based oracle in tests/oracles.py.
FK_CASES = [
    ([0, 0, 0.3, 0, 0, 0, 0, -0.5, 0, 1.5, 0, 0.5], [0.4018255199760641, 0.0, 0.3827860888813954]),
    ([0.2, -0.1, 0.3, 0.1, -0.2, 0.7, 0.3, 0.2, -0.4, 1.1, 0.5, -0.6],
     [0.45545669185518295, 0.20497374014822317, 0.27099878017169593]),
]

angle = st.floats(-1.5, 1.5)
q_strategy = st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.2, 0.4),
                       angle, angle, st.floats(-math.pi, math.pi), *[angle] * 6)


def fk_pos(q):
    return forward_kinematics(KinematicsState.from_q(q), ARM).position


@pytest.mark.parametrize("q,expected", FK_CASES)
def test_forward_kinematics_frozen_values(q, expected):
    np.testing.assert_allclose(fk_pos(q), expected, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(q_strategy)
def test_forward_kinematics_matches_oracle(q):
    np.testing.assert_allclose(fk_pos(q), oracles.fk(q), atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(q_strategy)
def test_jacobian_matches_finite_differences(q):
    q = np.array(q)
    J = manipulator_jacobian(KinematicsState.from_q(q), ARM)
    np.testing.assert_allclose(J, oracles.fd_jacobian(oracles.fk, q), atol=1e-7)
    Ja = manipulator_jacobian(KinematicsState.from_q(q), ARM, frozen_base=True)
    np.testing.assert_allclose(Ja, J[:, 6:])


def test_reach_and_home():
    assert ARM.reach == pytest.approx(0.6)
    assert ARM.within_limits(HOME_JOINTS)
    assert not ARM.within_limits([0, 0, 0, 3.0, 0, 0])
    np.testing.assert_array_equal(ARM.clip([5, -5, 0, 0, 0, 0])[:2], [2.8, -1.6])


def test_joint_count_mismatch():
    with pytest.raises(ValueError):
        forward_kinematics(KinematicsState(np.zeros(6), np.zeros(5)), ARM)


@settings(max_examples=40, deadline=None)
@given(q_strategy, st.tuples(*[st.floats(-0.1, 0.1)] * 3))
def test_dls_tracks_the_command_away_from_singularities(q, v):
    state = KinematicsState.from_q(q)
    res = ik_velocity(state, ARM, v)
    J = manipulator_jacobian(state, ARM, frozen_base=True)
    if res.min_singular_value > 0.05:
        np.testing.assert_allclose(J @ res.joint_velocities, v, atol=0.06 * np.linalg.norm(v) + 1e-12)
    assert np.all(np.isfinite(res.joint_velocities))


def test_dls_at_exact_singularity_is_finite_and_flagged():
    # Fully stretched arm: every link along x, so the chain loses rank.
    state = KinematicsState(np.array([0, 0, 0.3, 0, 0, 0.0]), np.zeros(6))
    res = ik_velocity(state, ARM, [0.1, 0.0, 0.0])
    assert res.singular
    assert np.all(np.isfinite(res.joint_velocities))
    assert np.linalg.norm(res.joint_velocities) < 1e3


def test_ik_clamps_speed():
    state = KinematicsState(np.array([0, 0, 0.3, 0, 0, 0.0]), np.array(HOME_JOINTS))
    res = ik_velocity(state, ARM, [1.0, 0, 0])
    assert res.clamped
    J = manipulator_jacobian(state, ARM, frozen_base=True)
    assert np.linalg.norm(J @ res.joint_velocities) <= ARM.ee_velocity_limit + 1e-9
    assert not ik_velocity(state, ARM, [0.01, 0, 0]).clamped


def test_apply_joint_velocities_clips_to_limits():
    state = KinematicsState(np.zeros(6), np.array(HOME_JOINTS))
    out = apply_joint_velocities(state, ARM, [0, 0, 0, 100.0, 0, 0], 0.1)
    assert out.arm_joints[3] == 2.4
    assert ARM.within_limits(out.arm_joints)


def test_segment_rect_cases():
    r = (0.0, 0.0, 1.0, 1.0)
    assert segment_hits_rect((-1, 0.5), (2, 0.5), r)
    assert not segment_hits_rect((-1, 1.5), (2, 1.5), r)
    assert not segment_hits_rect((-1, 1.0), (2, 1.0), r)   # grazing the edge is allowed
    assert segment_hits_rect((0.5, 0.5), (0.6, 0.6), r)
    assert not segment_hits_rect((-1, -1), (-0.5, 2), r)
    assert point_in_rect((0.5, 0.5), r) and not point_in_rect((1.0, 0.5), r)
    assert point_in_rect((1.0, 0.5), r, strict=False)
    assert inflate(r, 0.1) == (-0.1, -0.1, 1.1, 1.1)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(["left", "right", "bottom", "top"]), st.sampled_from(["left", "right", "bottom", "top"]),
       st.floats(0.05, 0.85), st.floats(0.05, 0.85))
def test_planned_paths_keep_clear_of_the_table(side_a, side_b, ta, tb):
    def around(side, t):
        return {"left": (-0.3, t * 0.9), "right": (1.1, t * 0.9), "bottom": (t * 0.8, -0.3),
                "top": (t * 0.8, 1.2)}[side]
    a, b = around(side_a, ta), around(side_b, tb)
    wps = plan_base_path((*a, 0.0), (*b, 1.0), TABLE, 0.15)
    keep_out = inflate(TABLE, 0.15)
    pts = [a] + [w[:2] for w in wps]
    for p, q in zip(pts, pts[1:]):
        assert not segment_hits_rect(p, q, keep_out)
    assert wps[-1] == (b[0], b[1], 1.0)


def test_advance_base_reaches_goal_and_never_overshoots():
    state = KinematicsState(np.array([1.15, 0.85, 0.3, 0, 0, math.pi]), np.array(HOME_JOINTS))
    goal = (-0.2, 0.45, 0.0)
    plan = BasePlan(plan_base_path((1.15, 0.85, math.pi), goal, TABLE, 0.15), 0.2, 0.15, TABLE)
    keep_out = inflate(TABLE, 0.15)
    done, steps, travelled = False, 0, 0.0
    while not done:
        prev = state.base_pose[:2].copy()
        state, done = advance_base(state, plan, 0.033)
        step = np.linalg.norm(state.base_pose[:2] - prev)
        assert step <= 0.2 * 0.033 + 1e-9
        assert not point_in_rect(state.base_pose[:2], keep_out)
        travelled += step
        steps += 1
        assert steps < 10000
    np.testing.assert_allclose(state.base_pose[[0, 1, 5]], goal)


def test_base_plan_rejects_waypoint_in_footprint():
    with pytest.raises(ValueError):
        BasePlan([(0.4, 0.4, 0.0)], 0.2, 0.15, TABLE)
    with pytest.raises(ValueError):
        BasePlan([], 0.0, 0.15, TABLE)


def test_standing_position_prefers_nearest_side():
    x, y, yaw = standing_position_for((0.76, 0.80), TABLE, ARM.reach)
    assert (x, y) == pytest.approx((1.0, 0.80)) and yaw == pytest.approx(math.pi)
    x, y, yaw = standing_position_for((0.04, 0.45), TABLE, ARM.reach)
    assert (x, y, yaw) == pytest.approx((-0.2, 0.45, 0.0))


def test_standing_position_respects_free_sides_and_reach():
    with pytest.raises(UnreachableError):
        standing_position_for((0.4, 0.45), TABLE, ARM.reach)   # table centre is out of reach
    with pytest.raises(UnreachableError):
        standing_position_for((0.04, 0.45), TABLE, ARM.reach, free_sides=("right",))
    with pytest.raises(UnreachableError):
        standing_position_for((2.0, 0.45), TABLE, ARM.reach)
