"""The simulated robot and cloth, advanced one control tick at a time."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..cloth import ClothSim, ClothState, FeatureVector, measure_features
from ..kinematics import (BasePlan, KinematicsState, advance_base, forward_kinematics, ik_velocity,
                          inflate, point_in_rect)
from .config import ScenarioConfig
from .recipes import apply_recipe

JOINT_RATE = 1.0   # rad/s cap when driving joints toward a configuration


@dataclass
class BaseSample:
    sim_time: float
    x: float
    y: float
    yaw: float


class World:
    """Cloth, sensor and mobile manipulator sharing one clock.

    Behaviors post at most one command per tick (the last one posted wins);
    :meth:`advance` then moves everything forward by one control period and
    runs the cloth physics substeps with the end-effector interpolated
    between its poses at the start and end of the tick.
    """

    def __init__(self, cfg: ScenarioConfig, seed: Optional[int] = None, start_joints=None):
        self.cfg = cfg
        self.seed = cfg.seed if seed is None else seed
        self.sim = ClothSim(cfg.cloth)
        self.attachments = cfg.attachments()
        self.sensor = cfg.sensor_model(self.seed)
        self.arm = cfg.arm_model()
        self.period = cfg.cloth.control_period
        flat = self.sim.initial_state()
        corners = {f.id: f.particle for f in cfg.features}
        self.cloth: ClothState = apply_recipe(self.sim, flat, cfg.deformation, corners)
        sx, sy, syaw = cfg.base.start
        joints = np.array(cfg.arm.home if start_joints is None else start_joints, dtype=float)
        self.kin = KinematicsState(np.array([sx, sy, cfg.base.height, 0.0, 0.0, syaw]), joints)
        self.tick_index = 0
        self.targets = np.array(cfg.target_points()).reshape(-1)
        self.base_log: list[BaseSample] = [self._base_sample()]
        self.path_length = 0.0
        self._command: tuple = ("hold",)

    # -- observation ------------------------------------------------------------------------------

    @property
    def time(self) -> float:
        return self.tick_index * self.period

    def measure(self) -> FeatureVector:
        return measure_features(self.cloth, self.attachments, self.sensor, self.time)

    def ee_position(self) -> np.ndarray:
        return forward_kinematics(self.kin, self.arm).position

    def grasped(self) -> bool:
        return self.cloth.grasp is not None

    def feature_particle(self, feature_id: int) -> int:
        for a in self.attachments:
            if a.feature_id == feature_id:
                return a.particle_index
        raise KeyError(feature_id)

    def base_xy(self) -> np.ndarray:
        return self.kin.base_pose[:2].copy()

    # -- commands ---------------------------------------------------------------------------------

    def command_hold(self) -> None:
        self._command = ("hold",)

    def command_ee_velocity(self, u) -> None:
        self._command = ("ee", np.asarray(u, dtype=float).copy())

    # Plant protocol name used by the deformation controller.
    apply_ee_velocity = command_ee_velocity

    def command_joints_toward(self, target) -> None:
        self._command = ("joints", np.asarray(target, dtype=float).copy())

    def command_base(self, plan: BasePlan) -> None:
        self._command = ("base", plan)

    def command_ee_toward(self, point, speed: float) -> float:
        """Post a capped proportional move toward ``point``; returns the remaining distance."""
        err = np.asarray(point, dtype=float) - self.ee_position()
        dist = float(np.linalg.norm(err))
        gain = 1.0 / self.period   # reach in one tick when close
        v = gain * err
        n = float(np.linalg.norm(v))
        if n > speed:
            v *= speed / n
        self.command_ee_velocity(v)
        return dist

    def grasp(self, tolerance: float) -> bool:
        st = self.sim.attach_grasp(self.cloth, self.ee_position(), tolerance)
        if st is None:
            return False
        self.cloth = st
        return True

    def release(self) -> None:
        self.cloth = self.sim.release_grasp(self.cloth)

    # -- time step --------------------------------------------------------------------------------

    def advance(self) -> None:
        """Execute the pending command for one control period."""
        kind = self._command[0]
        ee0 = self.ee_position()
        if kind == "ee":
            u = self._command[1].copy()
            # The gripper never goes below the table top.
            z_min = self.cfg.cloth.table_height
            if ee0[2] + u[2] * self.period < z_min:
                u[2] = (z_min - ee0[2]) / self.period
            qdot = ik_velocity(self.kin, self.arm, u).joint_velocities
            self.kin = KinematicsState(self.kin.base_pose.copy(),
                                       self.arm.clip(self.kin.arm_joints + self.period * qdot))
        elif kind == "joints":
            delta = self._command[1] - self.kin.arm_joints
            step = JOINT_RATE * self.period
            n = float(np.max(np.abs(delta))) if len(delta) else 0.0
            if n > step:
                delta *= step / n
            self.kin = KinematicsState(self.kin.base_pose.copy(), self.arm.clip(self.kin.arm_joints + delta))
        elif kind == "base":
            before = self.base_xy()
            self.kin, _ = advance_base(self.kin, self._command[1], self.period)
            self.path_length += float(np.linalg.norm(self.base_xy() - before))
        ee1 = self.ee_position()

        n_sub = self.cfg.cloth.substeps_per_control_tick
        st = self.cloth
        for i in range(1, n_sub + 1):
            st = self.sim.step(st, ee0 + (i / n_sub) * (ee1 - ee0) if st.grasp is not None else None)
        self.cloth = st
        self.tick_index += 1
        self._command = ("hold",)
        self.base_log.append(self._base_sample())

    def _base_sample(self) -> BaseSample:
        p = self.kin.base_pose
        return BaseSample(self.time, float(p[0]), float(p[1]), float(p[5]))

    # -- audits -----------------------------------------------------------------------------------

    def footprint_violations(self) -> list[BaseSample]:
        keep_out = inflate(self.cfg.cloth.table_extent, self.cfg.base.safe_distance)
        return [b for b in self.base_log if point_in_rect((b.x, b.y), keep_out)]

    def feature_errors(self, s: FeatureVector) -> np.ndarray:
        """Per-feature planar distance to target."""
        return np.linalg.norm((s.values - self.targets).reshape(-1, 2), axis=1)
