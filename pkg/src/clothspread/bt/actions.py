"""The cloth-spreading tree: initialization, base relocation, grasp verification and deformation control."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..control import (ControllerConfig, DeformationController, JacobianEstimate, Outcome, TaskFunction)
from ..kinematics import BasePlan, UnreachableError, plan_base_path, standing_position_for
from .engine import (Action, BehaviorTree, Blackboard, Condition, Inverter, Loop, Retry, Root, Sequence,
                     TickStatus)

JOINT_TOLERANCE = 1e-3
APPROACH_TOLERANCE = 1e-3
APPROACH_TIMEOUT = 15.0
SAME_STAND = 0.01   # base poses closer than this count as the same standing position
RUNNING, SUCCESS, FAILURE = TickStatus.RUNNING, TickStatus.SUCCESS, TickStatus.FAILURE


@dataclass
class ControlEpisode:
    """One DeformationControl execution, kept for logging and metrics."""

    feature_ids: tuple
    grasp_feature: int
    stand_index: int
    start_time: float
    controller: DeformationController
    outcome: Optional[Outcome] = None
    end_time: Optional[float] = None
    hold_height: float = 0.0


@dataclass
class GraspCheck:
    sim_time: float
    walk_cycle: int
    stand_index: int
    feature_id: int
    height_offset: float
    grasped: bool
    displacement: float
    success: bool


def _feature_point(s, fid: int) -> np.ndarray:
    return s.point(fid)


def unconverged_features(world, s, tolerance: float) -> list[int]:
    err = world.feature_errors(s)
    return [i + 1 for i, e in enumerate(err) if e > tolerance]


def nearest_feature(s, candidates, origin) -> int:
    """Nearest candidate to ``origin`` (x, y); exact ties go to the lowest feature id."""
    origin = np.asarray(origin, dtype=float)[:2]
    return min(candidates, key=lambda f: (float(np.linalg.norm(s.point(f) - origin)), f))


class InitializeWholeRobotSystem(Action):
    """Drive the arm to its home joints and mark the base as standing."""

    def __init__(self, name: str = "InitializeWholeRobotSystem"):
        super().__init__(name)

    def update(self, bb):
        world = bb["world"]
        home = np.asarray(bb["config"].arm.home)
        bb["base_standing"] = True
        if np.max(np.abs(world.kin.arm_joints - home)) <= JOINT_TOLERANCE:
            return SUCCESS
        world.command_joints_toward(home)
        return RUNNING


class WalkToFeaturePoint(Action):
    """Pick the nearest unconverged feature, stow the arm, and drive to a standing pose for it."""

    def __init__(self, name: str = "WalkToFeaturePoint"):
        super().__init__(name)
        self._plan: Optional[BasePlan] = None
        self._stowed = False

    def reset(self):
        self._plan = None
        self._stowed = False

    def update(self, bb):
        world, cfg = bb["world"], bb["config"]
        if self._plan is None:
            s = world.measure()
            todo = unconverged_features(world, s, cfg.bt.flatten_tolerance)
            if not todo:
                todo = [f.id for f in cfg.features]
            fid = nearest_feature(s, todo, world.base_xy())
            group = next(g for g in cfg.feature_groups() if fid in g)
            grasp_point = _feature_point(s, fid)
            try:
                stand = standing_position_for(
                    grasp_point, cfg.cloth.table_extent, world.arm.reach, arm=world.arm,
                    safe_distance=cfg.base.safe_distance, standoff=cfg.base.standoff,
                    base_height=cfg.base.height, table_height=cfg.cloth.table_height,
                    free_sides=cfg.base.free_sides)
            except UnreachableError:
                return FAILURE
            pose = world.kin.base_pose
            waypoints = plan_base_path((pose[0], pose[1], pose[5]), stand, cfg.cloth.table_extent,
                                       cfg.base.safe_distance)
            self._plan = BasePlan(waypoints, cfg.base.speed, cfg.base.safe_distance, cfg.cloth.table_extent)
            stands = bb["standing_positions"]
            if not stands or np.hypot(stand[0] - stands[-1][0], stand[1] - stands[-1][1]) > SAME_STAND:
                stands.append(tuple(float(v) for v in stand))
            bb["stand_index"] = len(stands) - 1
            bb["grasp_feature"] = fid
            bb["controlled_features"] = tuple(group)
            bb["walk_cycle"] = bb["walk_cycle"] + 1
            bb["grasp_offset"] = 0.0
        if not self._stowed:
            home = np.asarray(cfg.arm.home)
            if np.max(np.abs(world.kin.arm_joints - home)) > JOINT_TOLERANCE:
                world.command_joints_toward(home)
                return RUNNING
            self._stowed = True
        if not self._plan.waypoints:
            return SUCCESS
        world.command_base(self._plan)
        return RUNNING


class MoveEndEffectorAndCheckIfClothMoveTogether(Action):
    """Grasp at the feature's measured position, nudge it sideways, and confirm the feature followed."""

    def __init__(self, name: str = "MoveEndEffectorAndCheckIfClothMoveTogether"):
        super().__init__(name)
        self.reset()

    def reset(self):
        self._phase = "start"
        self._approach_point = None
        self._approach_start = 0.0
        self._closest = None
        self._velocity = None
        self._samples: list = []

    def update(self, bb):
        world, cfg = bb["world"], bb["config"]
        if self._phase == "start":
            s = world.measure()
            fid = bb["grasp_feature"]
            biases = cfg.bt.grasp_height_bias
            bias = biases[min(bb["walk_cycle"] - 1, len(biases) - 1)]
            gx, gy = _feature_point(s, fid)
            self._approach_point = np.array([gx, gy, cfg.cloth.table_height + bias + bb["grasp_offset"]])
            self._approach_start = world.time
            self._phase = "approach"
        if self._phase == "approach":
            dist = world.command_ee_toward(self._approach_point, cfg.bt.approach_speed)
            if dist > APPROACH_TOLERANCE:
                if world.time - self._approach_start > APPROACH_TIMEOUT:
                    return self._fail(bb, grasped=False, displacement=0.0)
                return RUNNING
            grasped = world.grasp(cfg.bt.grasp_tolerance)
            s = world.measure()
            ee = world.ee_position()
            self._closest = nearest_feature(s, [f.id for f in cfg.features], ee)
            target = world.targets.reshape(-1, 2)[self._closest - 1]
            direction = target - s.point(self._closest)
            n = float(np.linalg.norm(direction))
            direction = direction / n if n > 1e-6 else np.array([1.0, 0.0])
            speed = cfg.bt.check_displacement / cfg.bt.check_window
            self._velocity = np.array([direction[0] * speed, direction[1] * speed, 0.0])
            self._grasped = grasped
            self._samples = [s.point(self._closest).copy()]
            self._phase = "check"
            world.command_ee_velocity(self._velocity)
            return RUNNING
        # check window
        s = world.measure()
        self._samples.append(s.point(self._closest).copy())
        n_window = int(round(cfg.bt.check_window / world.period))
        if len(self._samples) <= n_window:
            world.command_ee_velocity(self._velocity)
            return RUNNING
        pts = np.array(self._samples)
        k = min(5, len(pts) // 2)
        moved = float(np.linalg.norm(pts[-k:].mean(axis=0) - pts[:k].mean(axis=0)))
        if moved >= cfg.bt.check_threshold:
            self._log(bb, self._grasped, moved, True)
            self._phase = "done"
            return SUCCESS
        return self._fail(bb, self._grasped, moved)

    def _fail(self, bb, grasped: bool, displacement: float):
        world, cfg = bb["world"], bb["config"]
        world.release()
        self._log(bb, grasped, displacement, False)
        r = cfg.bt.grasp_offset_range
        bb["grasp_offset"] = float(bb["rng"].uniform(-r, r)) if r > 0 else 0.0
        self.reset()
        return FAILURE

    def _log(self, bb, grasped, displacement, success):
        bb["grasp_checks"].append(GraspCheck(bb["world"].time, bb["walk_cycle"], bb["stand_index"],
                                             bb["grasp_feature"],
                                             float(self._approach_point[2] - bb["config"].cloth.table_height),
                                             bool(grasped), displacement, success))


class DeformationControl(Action):
    """Run the Broyden controller on the features assigned to this grasp until it converges or times out."""

    def __init__(self, name: str = "DeformationControl"):
        super().__init__(name)
        self._episode: Optional[ControlEpisode] = None

    def reset(self):
        self._episode = None

    def _start(self, bb) -> ControlEpisode:
        world, cfg = bb["world"], bb["config"]
        ids = tuple(sorted(bb["controlled_features"]))
        task = TaskFunction.for_features(ids, 2, world.targets)
        c = cfg.controller
        if c.jacobian_init == "identity":
            est = JacobianEstimate.identity(task.m, c.ee_dims, alpha=c.alpha)
        else:
            est = JacobianEstimate.feature_blocks(len(ids), 2, c.ee_dims, alpha=c.alpha)
        ccfg = ControllerConfig.scalar_gain(c.gain, task.m, convergence_threshold=c.convergence_threshold,
                                            convergence_hold=c.convergence_hold, max_duration=c.max_duration,
                                            ee_speed_cap=c.ee_speed_cap, smoothing=c.smoothing)
        ep = ControlEpisode(ids, bb["grasp_feature"], bb["stand_index"], world.time,
                            DeformationController(task, ccfg, est), hold_height=float(world.ee_position()[2]))
        bb["episodes"].append(ep)
        return ep

    def update(self, bb):
        world = bb["world"]
        if self._episode is None:
            self._episode = self._start(bb)
        ep = self._episode
        if not world.grasped():
            return self._finish(bb, Outcome.GRASP_LOST)
        p = ep.controller.est.shape[1]
        ee = world.ee_position()
        outcome, u = ep.controller.tick(world.measure(), ee[:p], world.time)
        if outcome is None:
            if p == 2:
                # Planar control: hold the grasp height.
                u = np.array([u[0], u[1], (ep.hold_height - ee[2]) / world.period])
            world.command_ee_velocity(u)
            return RUNNING
        return self._finish(bb, outcome)

    def _finish(self, bb, outcome: Outcome):
        world = bb["world"]
        world.release()
        world.command_hold()
        self._episode.outcome = outcome
        self._episode.end_time = world.time
        self._episode = None
        return SUCCESS if outcome is Outcome.CONVERGED else FAILURE


def is_cloth_flattened(bb: Blackboard) -> bool:
    world, cfg = bb["world"], bb["config"]
    flat = bool(np.all(world.feature_errors(world.measure()) <= cfg.bt.flatten_tolerance))
    bb["flattened"] = flat
    return flat


def build_tree(world, cfg, seed: Optional[int] = None) -> tuple[BehaviorTree, Blackboard]:
    """Root -> Sequence[Initialize, Loop(until flattened, Sequence[guard, Walk, Retry(MoveEE), Control])]."""
    seed = cfg.seed if seed is None else seed
    body = Sequence("FlattenStep", [
        Inverter("NotFlattened", Condition("IsClothFlattenedGuard", is_cloth_flattened)),
        WalkToFeaturePoint(),
        Retry("RetryNode", MoveEndEffectorAndCheckIfClothMoveTogether(), cfg.bt.retry_count),
        DeformationControl(),
    ])
    tree = BehaviorTree(
        Root(Sequence("MainSequence", [
            InitializeWholeRobotSystem(),
            Loop("UntilFlattened", Condition("IsClothFlattened", is_cloth_flattened), body),
        ])),
        clock=lambda: world.time,
    )
    bb = Blackboard(world=world, config=cfg, rng=np.random.default_rng([seed, 1]),
                    standing_positions=[], walk_cycle=0, grasp_offset=0.0, grasp_checks=[], episodes=[],
                    flattened=False)
    return tree, bb
