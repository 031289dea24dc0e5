"""Floating-base serial arm: forward kinematics, position Jacobian, damped IK and a kinematic base.

The generalized coordinate vector is ``q = [p_x, p_y, p_z, r_x, r_y, r_z, theta_1..theta_N]``.
Base orientation uses the Z-Y-X convention ``R = Rz(r_z) @ Ry(r_y) @ Rx(r_x)``.
Only the end-effector position is controlled, so the Jacobian has three rows.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import networkx as nx
import numpy as np

DLS_DAMPING = 0.01
SINGULAR_THRESHOLD = 1e-4
ARRIVAL_TOLERANCE = 1e-6
# Default home joints: gripper about 0.4 m in front of the base, 0.1 m above table height.
HOME_JOINTS = (0.0, -0.5, 0.0, 1.5, 0.0, 0.5)

_AXES = {"x": (1.0, 0.0, 0.0), "y": (0.0, 1.0, 0.0), "z": (0.0, 0.0, 1.0)}


class UnreachableError(Exception):
    def __init__(self, grasp_point, reason: str = "no free table side puts it within reach"):
        super().__init__(f"grasp point ({grasp_point[0]:.3f}, {grasp_point[1]:.3f}) is unreachable: {reason}")
        self.grasp_point = tuple(grasp_point)


def rot_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    x, y, z = axis
    c, s = math.cos(angle), math.sin(angle)
    C = 1.0 - c
    return np.array([
        [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
    ])


def base_rotation(rx: float, ry: float, rz: float) -> np.ndarray:
    return rot_axis(np.array(_AXES["z"]), rz) @ rot_axis(np.array(_AXES["y"]), ry) @ rot_axis(np.array(_AXES["x"]), rx)


@dataclass(frozen=True)
class ArmModel:
    joint_axes: np.ndarray      # (N, 3) unit axes in each joint's local frame
    link_offsets: np.ndarray    # (N, 3) translation applied after joint i
    mount_offset: np.ndarray    # base frame -> first joint
    joint_limits: np.ndarray    # (N, 2) radians
    ee_velocity_limit: float = 0.15

    def __post_init__(self):
        axes = np.asarray(self.joint_axes, dtype=float)
        offsets = np.asarray(self.link_offsets, dtype=float)
        limits = np.asarray(self.joint_limits, dtype=float)
        object.__setattr__(self, "joint_axes", axes / np.linalg.norm(axes, axis=1, keepdims=True))
        object.__setattr__(self, "link_offsets", offsets)
        object.__setattr__(self, "mount_offset", np.asarray(self.mount_offset, dtype=float))
        object.__setattr__(self, "joint_limits", limits)
        n = len(axes)
        if offsets.shape != (n, 3) or limits.shape != (n, 2):
            raise ValueError(f"arm with {n} joints needs (N,3) offsets and (N,2) limits")
        if np.any(np.linalg.norm(offsets, axis=1) <= 0):
            raise ValueError("all link lengths must be positive")
        if np.any(limits[:, 0] >= limits[:, 1]):
            raise ValueError("joint limits must satisfy lower < upper")

    @property
    def n_joints(self) -> int:
        return len(self.joint_axes)

    @property
    def reach(self) -> float:
        return float(np.sum(np.linalg.norm(self.link_offsets, axis=1)))

    def within_limits(self, joints, tol: float = 0.0) -> bool:
        q = np.asarray(joints)
        return bool(np.all(q >= self.joint_limits[:, 0] - tol) and np.all(q <= self.joint_limits[:, 1] + tol))

    def clip(self, joints) -> np.ndarray:
        return np.clip(joints, self.joint_limits[:, 0], self.joint_limits[:, 1])

    @classmethod
    def default(cls) -> "ArmModel":
        """Six revolute joints alternating z/y with 0.6 m of total link length."""
        return cls(
            joint_axes=np.array([_AXES[a] for a in "zyzyzy"]),
            link_offsets=np.array([
                [0.0, 0.0, 0.10],
                [0.22, 0.0, 0.0],
                [0.05, 0.0, 0.0],
                [0.18, 0.0, 0.0],
                [0.03, 0.0, 0.0],
                [0.02, 0.0, 0.0],
            ]),
            mount_offset=np.array([0.05, 0.0, 0.05]),
            joint_limits=np.array([[-2.8, 2.8], [-1.6, 2.2], [-2.8, 2.8], [-2.4, 2.4], [-2.8, 2.8], [-2.0, 2.0]]),
        )


@dataclass
class KinematicsState:
    base_pose: np.ndarray   # (p_x, p_y, p_z, r_x, r_y, r_z)
    arm_joints: np.ndarray

    def __post_init__(self):
        self.base_pose = np.asarray(self.base_pose, dtype=float)
        self.arm_joints = np.asarray(self.arm_joints, dtype=float)
        if self.base_pose.shape != (6,):
            raise ValueError("base pose must have 6 entries")

    @property
    def q(self) -> np.ndarray:
        return np.concatenate([self.base_pose, self.arm_joints])

    @classmethod
    def from_q(cls, q) -> "KinematicsState":
        q = np.asarray(q, dtype=float)
        return cls(q[:6].copy(), q[6:].copy())

    @property
    def yaw(self) -> float:
        return float(self.base_pose[5])

    def copy(self) -> "KinematicsState":
        return KinematicsState(self.base_pose.copy(), self.arm_joints.copy())


@dataclass(frozen=True)
class EEPose:
    position: np.ndarray
    rotation: np.ndarray


def _chain(state: KinematicsState, arm: ArmModel):
    """Yield world-frame (origin, axis) for every joint and return the end-effector frame."""
    if len(state.arm_joints) != arm.n_joints:
        raise ValueError(f"state has {len(state.arm_joints)} joints, arm has {arm.n_joints}")
    p = state.base_pose
    R = base_rotation(p[3], p[4], p[5])
    t = p[:3] + R @ arm.mount_offset
    origins, axes = [], []
    for axis, offset, theta in zip(arm.joint_axes, arm.link_offsets, state.arm_joints):
        origins.append(t)
        axes.append(R @ axis)
        R = R @ rot_axis(axis, theta)
        t = t + R @ offset
    return np.array(origins), np.array(axes), t, R


def forward_kinematics(state: KinematicsState, arm: ArmModel) -> EEPose:
    _, _, t, R = _chain(state, arm)
    return EEPose(t, R)


def manipulator_jacobian(state: KinematicsState, arm: ArmModel, frozen_base: bool = False) -> np.ndarray:
    """Position Jacobian d(ee)/dq, 3 x N with a frozen base, otherwise 3 x (6 + N)."""
    origins, axes, ee, _ = _chain(state, arm)
    J_arm = np.cross(axes, ee - origins).T
    if frozen_base:
        return J_arm
    rx, ry, rz = state.base_pose[3:]
    lever = ee - state.base_pose[:3]
    ez = np.array(_AXES["z"])
    ey = rot_axis(ez, rz) @ np.array(_AXES["y"])
    ex = rot_axis(ez, rz) @ rot_axis(np.array(_AXES["y"]), ry) @ np.array(_AXES["x"])
    J_rot = np.column_stack([np.cross(ex, lever), np.cross(ey, lever), np.cross(ez, lever)])
    return np.hstack([np.eye(3), J_rot, J_arm])


@dataclass(frozen=True)
class IKResult:
    joint_velocities: np.ndarray
    singular: bool
    clamped: bool
    min_singular_value: float


def ik_velocity(state: KinematicsState, arm: ArmModel, ee_velocity_cmd, frozen_base: bool = True,
                damping: float = DLS_DAMPING, singular_threshold: float = SINGULAR_THRESHOLD) -> IKResult:
    """Damped least-squares inversion of the differential kinematics.

    The command is clamped to ``arm.ee_velocity_limit`` first. Joint
    velocities stay finite at exact singularities; ``singular`` reports when
    the smallest singular value falls under ``singular_threshold``.
    """
    v = np.asarray(ee_velocity_cmd, dtype=float)
    speed = float(np.linalg.norm(v))
    clamped = speed > arm.ee_velocity_limit
    if clamped:
        v = v * (arm.ee_velocity_limit / speed)
    J = manipulator_jacobian(state, arm, frozen_base)
    U, S, Vt = np.linalg.svd(J, full_matrices=False)
    gains = S / (S**2 + damping**2)
    qdot = Vt.T @ (gains * (U.T @ v))
    s_min = float(S[-1]) if len(S) else 0.0
    return IKResult(qdot, s_min < singular_threshold, clamped, s_min)


def apply_joint_velocities(state: KinematicsState, arm: ArmModel, qdot, dt: float,
                           frozen_base: bool = True) -> KinematicsState:
    """Integrate joint velocities over ``dt`` and clip the arm to its limits."""
    qdot = np.asarray(qdot, dtype=float)
    if frozen_base:
        return KinematicsState(state.base_pose.copy(), arm.clip(state.arm_joints + dt * qdot))
    q = state.q + dt * qdot
    q[6:] = arm.clip(q[6:])
    return KinematicsState.from_q(q)


# --- mobile base ---------------------------------------------------------------------------------

Rect = tuple[float, float, float, float]


def inflate(rect: Rect, margin: float) -> Rect:
    x0, y0, x1, y1 = rect
    return (x0 - margin, y0 - margin, x1 + margin, y1 + margin)


def point_in_rect(p, rect: Rect, strict: bool = True) -> bool:
    x0, y0, x1, y1 = rect
    if strict:
        return x0 < p[0] < x1 and y0 < p[1] < y1
    return x0 <= p[0] <= x1 and y0 <= p[1] <= y1


def segment_hits_rect(a, b, rect: Rect) -> bool:
    """Liang-Barsky test: does the open segment a-b pass through the open rectangle?"""
    x0, y0, x1, y1 = rect
    dx, dy = b[0] - a[0], b[1] - a[1]
    t0, t1 = 0.0, 1.0
    for p, q in ((-dx, a[0] - x0), (dx, x1 - a[0]), (-dy, a[1] - y0), (dy, y1 - a[1])):
        if p == 0.0:
            if q <= 0.0:
                return False
            continue
        t = q / p
        if p < 0:
            t0 = max(t0, t)
        else:
            t1 = min(t1, t)
        if t0 >= t1:
            return False
    return True


@dataclass
class BasePlan:
    waypoints: list   # [(x, y, yaw), ...]
    speed: float
    safe_distance: float
    table_extent: Rect

    def __post_init__(self):
        if self.speed <= 0:
            raise ValueError("base speed must be positive")
        keep_out = inflate(self.table_extent, self.safe_distance)
        for wp in self.waypoints:
            if point_in_rect(wp, keep_out):
                raise ValueError(f"waypoint ({wp[0]:.3f}, {wp[1]:.3f}) lies inside the inflated table footprint")


def advance_base(state: KinematicsState, plan: BasePlan, dt: float) -> tuple[KinematicsState, bool]:
    """Move the base toward the current waypoint at ``plan.speed``.

    Waypoints are popped from ``plan.waypoints`` as they are reached. The base
    yaws to its travel direction while moving and takes the waypoint's yaw on
    arrival. Returns the new state and whether the plan is exhausted.
    """
    pose = state.base_pose.copy()
    if not plan.waypoints:
        return KinematicsState(pose, state.arm_joints.copy()), True
    wx, wy, wyaw = plan.waypoints[0]
    delta = np.array([wx - pose[0], wy - pose[1]])
    dist = float(np.hypot(*delta))
    step = plan.speed * dt
    if dist <= step + ARRIVAL_TOLERANCE:
        pose[0], pose[1], pose[5] = wx, wy, wyaw
        plan.waypoints.pop(0)
    else:
        pose[:2] += delta * (step / dist)
        pose[5] = math.atan2(delta[1], delta[0])
    return KinematicsState(pose, state.arm_joints.copy()), not plan.waypoints


def plan_base_path(start, goal, table_extent: Rect, safe_distance: float, margin: float = 0.05) -> list:
    """Shortest waypoint list from ``start`` to ``goal`` (x, y, yaw) around the inflated table.

    Detours go through the corners of the table footprint inflated by
    ``safe_distance + margin``; straight segments never cross the footprint
    inflated by ``safe_distance``.
    """
    keep_out = inflate(table_extent, safe_distance)
    x0, y0, x1, y1 = inflate(table_extent, safe_distance + margin)
    nodes = {"start": tuple(start[:2]), "goal": tuple(goal[:2]),
             "c0": (x0, y0), "c1": (x1, y0), "c2": (x1, y1), "c3": (x0, y1)}
    g = nx.Graph()
    names = list(nodes)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            if not segment_hits_rect(nodes[a], nodes[b], keep_out):
                g.add_edge(a, b, weight=math.dist(nodes[a], nodes[b]))
    path = nx.shortest_path(g, "start", "goal", weight="weight")
    waypoints = []
    for prev, name in zip(path, path[1:]):
        if name == "goal":
            waypoints.append((float(goal[0]), float(goal[1]), float(goal[2])))
        else:
            px, py = nodes[prev]
            cx, cy = nodes[name]
            waypoints.append((cx, cy, math.atan2(cy - py, cx - px)))
    return waypoints


def standing_position_for(grasp_point, table_extent: Rect, arm_reach: float, *, arm: Optional[ArmModel] = None,
                          safe_distance: float = 0.15, standoff: float = 0.05, base_height: float = 0.30,
                          table_height: float = 0.28, free_sides: Sequence[str] = ("left", "right", "bottom", "top"),
                          reach_fraction: float = 0.9) -> tuple[float, float, float]:
    """Base pose (x, y, yaw) beside the table that faces ``grasp_point`` and keeps it within reach.

    Candidate poses sit ``safe_distance + standoff`` outside each free table
    side, level with the grasp point. The nearest feasible candidate wins, with
    ties going to the earlier side in ``free_sides``. Reach is measured from
    the arm mount (first joint) to the grasp point on the table top.
    """
    gx, gy = float(grasp_point[0]), float(grasp_point[1])
    if not point_in_rect((gx, gy), table_extent, strict=False):
        raise UnreachableError((gx, gy), "it is not on the table")
    x0, y0, x1, y1 = table_extent
    gap = safe_distance + standoff
    sides = {
        "left": (x0 - gap, gy, 0.0),
        "right": (x1 + gap, gy, math.pi),
        "bottom": (gx, y0 - gap, math.pi / 2),
        "top": (gx, y1 + gap, -math.pi / 2),
    }
    arm = arm or ArmModel.default()
    best = None
    for side in free_sides:
        bx, by, yaw = sides[side]
        c, s = math.cos(yaw), math.sin(yaw)
        m = arm.mount_offset
        mount = np.array([bx + c * m[0] - s * m[1], by + s * m[0] + c * m[1], base_height + m[2]])
        dist = float(np.linalg.norm(mount - np.array([gx, gy, table_height])))
        if dist <= reach_fraction * arm_reach and (best is None or dist < best[0]):
            best = (dist, (bx, by, yaw))
    if best is None:
        raise UnreachableError((gx, gy))
    return best[1]
