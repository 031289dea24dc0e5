import dataclasses

import numpy as np
import pytest

from clothspread.bt.actions import (DeformationControl, InitializeWholeRobotSystem, build_tree, is_cloth_flattened,
                                    nearest_feature)
from clothspread.bt.engine import (Action, BehaviorTree, Blackboard, BlackboardError, Condition, Inverter, Loop,
                                   Retry, Root, Sequence, TickStatus, TreeError)
from clothspread.cloth import FeatureVector
from clothspread.harness.config import ConfigError, scenario_from_dict
from clothspread.harness.world import World

S, F, R = TickStatus.SUCCESS, TickStatus.FAILURE, TickStatus.RUNNING


def const(name, status):
    return Action(name, lambda bb: status)


# --- engine --------------------------------------------------------------------------------------


def test_sequence_of_successes():
    a, b = const("a", S), const("b", S)
    tree = BehaviorTree(Root(Sequence("seq", [a, b])))
    assert tree.tick(Blackboard()) is S
    assert (a.executions, b.executions) == (1, 1)


def test_sequence_short_circuits_on_failure():
    a, b = const("a", F), const("b", S)
    tree = BehaviorTree(Root(Sequence("seq", [a, b])))
    assert tree.tick(Blackboard()) is F
    assert b.executions == 0


def test_sequence_resumes_running_child():
    calls = {"n": 0}

    def twice(bb):
        calls["n"] += 1
        return S if calls["n"] >= 2 else R

    a, b = const("a", S), Action("b", twice)
    tree = BehaviorTree(Root(Sequence("seq", [a, b])))
    assert tree.tick(Blackboard()) is R
    assert tree.tick(Blackboard()) is S
    assert a.executions == 1 and b.executions == 2


def test_retry_gives_exactly_n_attempts():
    child = const("child", F)
    tree = BehaviorTree(Root(Retry("retry", child, 5)))
    assert tree.tick(Blackboard()) is F
    assert child.executions == 5
    assert [r.node for r in tree.trace] == ["child"] * 5 + ["retry", "Root"]


def test_retry_stops_at_first_success():
    outcomes = iter([F, F, S])
    child = Action("child", lambda bb: next(outcomes))
    tree = BehaviorTree(Root(Retry("retry", child, 5)))
    assert tree.tick(Blackboard()) is S
    assert child.executions == 3


def test_retry_counts_failures_across_running_ticks():
    seq = iter([R, F, R, F, R, F])
    child = Action("child", lambda bb: next(seq))
    node = Retry("retry", child, 3)
    tree = BehaviorTree(Root(node))
    # Each failure is retried in the same tick, so the third failure lands on tick 4.
    statuses = [tree.tick(Blackboard()) for _ in range(4)]
    assert statuses == [R, R, R, F]
    assert child.executions == 6


def test_inverter_and_condition():
    bb = Blackboard(flag=True)
    cond = Condition("cond", lambda b: b["flag"])
    tree = BehaviorTree(Root(Inverter("not", cond)))
    assert tree.tick(bb) is F
    bb["flag"] = False
    assert tree.tick(bb) is S


def test_loop_runs_body_until_condition_holds():
    bb = Blackboard(count=0)

    def inc(b):
        b["count"] += 1
        return S

    tree = BehaviorTree(Root(Loop("loop", Condition("done", lambda b: b["count"] >= 3), Action("inc", inc))))
    statuses = [tree.tick(bb) for _ in range(4)]
    assert statuses == [R, R, R, S]
    assert bb["count"] == 3


def test_construction_errors():
    with pytest.raises(TreeError):
        Retry("r", const("a", S), 0)
    with pytest.raises(TreeError):
        Sequence("s", [])
    with pytest.raises(TreeError):
        BehaviorTree(Sequence("s", [const("a", S)]))
    with pytest.raises(TreeError):
        BehaviorTree(Root(Sequence("s", [const("a", S), const("a", F)])))
    with pytest.raises(TreeError):
        BehaviorTree(Root(Sequence("s", [Root(const("a", S), name="inner")])))
    with pytest.raises(TreeError):
        Sequence("s", ["not a node"])
    with pytest.raises(TreeError):
        Action("")


def test_blackboard_read_before_write_is_a_distinct_fault():
    bb = Blackboard()
    tree = BehaviorTree(Root(Condition("c", lambda b: b["missing"])))
    with pytest.raises(BlackboardError):
        tree.tick(bb)
    assert bb.get("missing") is None
    bb["missing"] = True
    assert "missing" in bb and tree.tick(bb) is S


def test_bad_status_type_is_rejected():
    tree = BehaviorTree(Root(Action("a", lambda bb: "SUCCESS?")))
    with pytest.raises(TypeError):
        tree.tick(Blackboard())


def test_trace_uses_clock():
    t = {"now": 0.0}
    tree = BehaviorTree(Root(const("a", S)), clock=lambda: t["now"])
    tree.tick(Blackboard())
    t["now"] = 0.5
    tree.tick(Blackboard())
    assert list(tree.trace_lines()) == ["0,a,SUCCESS", "0,Root,SUCCESS", "0.5,a,SUCCESS", "0.5,Root,SUCCESS"]


# --- action helpers ------------------------------------------------------------------------------


def test_nearest_feature_rule():
    s = FeatureVector(np.array([0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 5.0, 5.0]), 2, 4)
    assert nearest_feature(s, [2, 3], (0.9, 0.1)) == 2
    assert nearest_feature(s, [2, 3], (0.1, 0.9)) == 3


def test_nearest_feature_ties_go_to_lowest_id():
    s = FeatureVector(np.array([0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 5.0, 5.0]), 2, 4)
    assert nearest_feature(s, [3, 2], (0.5, 0.5)) == 2


class _StubWorld:
    def __init__(self, s, targets):
        self.s = FeatureVector(np.asarray(s, float), 2, len(s) // 2)
        self.targets = np.asarray(targets, float)

    def measure(self):
        return self.s

    def feature_errors(self, s):
        return np.linalg.norm((s.values - self.targets).reshape(-1, 2), axis=1)


def _flatten_bb(s, targets, tol=0.035):
    cfg = type("Cfg", (), {"bt": type("BT", (), {"flatten_tolerance": tol})()})()
    return Blackboard(world=_StubWorld(s, targets), config=cfg)


def test_flattened_condition_examples():
    targets = np.arange(8.0) * 0.1
    assert is_cloth_flattened(_flatten_bb(targets, targets))
    off = targets.copy()
    off[2] += 0.1
    assert not is_cloth_flattened(_flatten_bb(off, targets))
    noisy = targets + np.random.default_rng(0).normal(0.0, 0.002, 8)
    bb = _flatten_bb(noisy, targets)
    assert is_cloth_flattened(bb) and bb["flattened"]


# --- actions on the simulated world --------------------------------------------------------------


def test_initialize_drives_arm_home(bundled):
    cfg = bundled("condition1")
    world = World(cfg, start_joints=[0.5, 0.3, -0.4, 1.0, 0.2, -0.3])
    action = InitializeWholeRobotSystem()
    tree = BehaviorTree(Root(action), clock=lambda: world.time)
    bb = Blackboard(world=world, config=cfg)
    statuses = []
    while True:
        st = tree.tick(bb)
        statuses.append(st)
        if st is not R:
            break
        world.advance()
        assert len(statuses) < 1000
    assert statuses[0] is R and statuses[-1] is S
    assert np.max(np.abs(world.kin.arm_joints - np.array(cfg.arm.home))) <= 1e-3
    assert bb["base_standing"]


def test_initialize_already_home_succeeds_in_one_tick(bundled):
    cfg = bundled("condition1")
    world = World(cfg)
    tree = BehaviorTree(Root(InitializeWholeRobotSystem()))
    assert tree.tick(Blackboard(world=world, config=cfg)) is S


def test_limit_violating_home_is_a_config_error(bundled):
    data = bundled("condition1").to_dict()
    data["arm"]["home"][3] = 9.0
    with pytest.raises(ConfigError) as exc:
        scenario_from_dict(data)
    assert exc.value.field.startswith("arm.home")


def _run_tree(world, tree, bb, max_ticks, stop=None):
    for _ in range(max_ticks):
        status = tree.tick(bb)
        if status is not R or (stop is not None and stop()):
            return status
        world.advance()
    return R


def test_forced_controller_timeout_fails_the_action(bundled):
    cfg = bundled("condition1")
    cfg = cfg.with_overrides(controller=dataclasses.replace(cfg.controller, max_duration=0.1))
    world = World(cfg)
    tree, bb = build_tree(world, cfg)
    dc = tree.node("DeformationControl")
    _run_tree(world, tree, bb, 3000, stop=lambda: any(r.node == "DeformationControl" and r.status is F
                                                      for r in tree.trace[-12:]))
    dc_statuses = [r.status for r in tree.trace if r.node == "DeformationControl"]
    assert F in dc_statuses
    ep = bb["episodes"][0]
    assert ep.outcome.value == "timeout"
    assert ep.end_time - ep.start_time == pytest.approx(0.1, abs=world.period)
    assert not world.grasped()
    assert dc.executions == len(dc_statuses)


def test_controller_success_releases_grasp_and_cloth_stays_flat(bundled):
    cfg = bundled("condition1")
    world = World(cfg)
    tree, bb = build_tree(world, cfg)
    assert _run_tree(world, tree, bb, 4000) is S
    assert not world.grasped()
    for _ in range(int(round(1.0 / world.period))):
        world.advance()
    truth = world.cloth.positions[[f.particle for f in cfg.features], :2].ravel()
    assert np.linalg.norm(truth - world.targets) < cfg.controller.convergence_threshold


def test_tick_traces_are_deterministic(bundled):
    cfg = bundled("forced_miss")

    def trace():
        world = World(cfg)
        tree, bb = build_tree(world, cfg)
        _run_tree(world, tree, bb, 400)
        return list(tree.trace_lines())

    assert trace() == trace()


def test_grasp_checks_never_exceed_retry_count_per_walk(bundled):
    cfg = bundled("forced_miss")
    world = World(cfg)
    tree, bb = build_tree(world, cfg)
    _run_tree(world, tree, bb, 1500)
    cycles = [c.walk_cycle for c in bb["grasp_checks"]]
    assert cycles
    for w in set(cycles):
        assert cycles.count(w) <= cfg.bt.retry_count


def test_tree_topology(bundled):
    cfg = bundled("condition1")
    tree, _ = build_tree(World(cfg), cfg)
    names = [n.name for n in tree.root.walk()]
    assert names == ["Root", "MainSequence", "InitializeWholeRobotSystem", "UntilFlattened", "IsClothFlattened",
                     "FlattenStep", "NotFlattened", "IsClothFlattenedGuard", "WalkToFeaturePoint", "RetryNode",
                     "MoveEndEffectorAndCheckIfClothMoveTogether", "DeformationControl"]
    assert tree.node("RetryNode").n == 5
    assert isinstance(tree.node("DeformationControl"), DeformationControl)
