"""Scenario files: schema, validation with line-precise errors, and serialization.

A scenario is a YAML mapping with these top-level keys (all but ``name`` and
``seed`` optional):

- ``name``: scenario id, used when comparing runs.
- ``seed``: integer seed for the sensor noise and grasp offsets.
- ``max_sim_time``: run budget in simulated seconds.
- ``cloth``: any :class:`~clothspread.cloth.ClothConfig` field.
- ``features``: list of ``{id, cell: [row, col]}`` or ``{id, particle}``; default is the four corners.
- ``targets``: ``flat`` (the undeformed feature positions) or one ``[x, y]`` per feature.
- ``sensor``: ``noise_stddev``, ``rate_hz``.
- ``arm``: ``home`` joint vector, ``ee_velocity_limit``.
- ``base``: ``start`` (x, y, yaw), ``height``, ``speed``, ``safe_distance``, ``standoff``, ``free_sides``.
- ``controller``: ``gain`` (K = gain * I), ``alpha``, ``convergence_threshold``,
  ``convergence_hold``, ``max_duration``, ``ee_speed_cap``, ``smoothing``, ``jacobian_init``, ``ee_dims``.
- ``bt``: ``retry_count``, ``check_window``, ``check_threshold``, ``check_displacement``,
  ``flatten_tolerance``, ``grasp_tolerance``, ``grasp_offset_range``, ``grasp_height_bias``,
  ``approach_speed``, ``feature_groups``.
- ``deformation``: ``kind``, ``settle_time``, ``params``.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from ..cloth import ClothConfig, FeatureAttachment, SensorModel
from ..kinematics import HOME_JOINTS, ArmModel
from .recipes import RECIPE_KINDS, DeformationRecipe


class ConfigError(ValueError):
    def __init__(self, message: str, field: str = "", line: Optional[int] = None, source: str = ""):
        self.field = field
        self.line = line
        where = f"{source}:{line}: " if line is not None else (f"{source}: " if source else "")
        label = f"{field}: " if field else ""
        super().__init__(f"{where}{label}{message}")


@dataclass(frozen=True)
class SensorSection:
    noise_stddev: float = 0.002
    rate_hz: float = 30.0


@dataclass(frozen=True)
class ArmSection:
    home: tuple = HOME_JOINTS
    ee_velocity_limit: float = 0.15


@dataclass(frozen=True)
class BaseSection:
    start: tuple = (1.2, 0.7, math.pi)
    height: float = 0.30
    speed: float = 0.2
    safe_distance: float = 0.15
    standoff: float = 0.05
    free_sides: tuple = ("left", "right", "bottom", "top")


@dataclass(frozen=True)
class ControllerSection:
    gain: float = 3.5
    alpha: float = 0.1
    convergence_threshold: float = 0.032
    convergence_hold: float = 1.0
    max_duration: float = 120.0
    ee_speed_cap: float = 0.05
    smoothing: float = 0.0
    jacobian_init: str = "feature_blocks"
    # Controlled end-effector coordinates: 2 moves the gripper in the horizontal plane at fixed height.
    ee_dims: int = 2


@dataclass(frozen=True)
class BTSection:
    retry_count: int = 5
    check_window: float = 1.0
    check_threshold: float = 0.005
    check_displacement: float = 0.03
    flatten_tolerance: float = 0.035
    grasp_tolerance: float = 0.01
    grasp_offset_range: float = 0.01
    # Extra grasp height per walk cycle (last entry repeats); used to force misses.
    grasp_height_bias: tuple = (0.0,)
    approach_speed: float = 0.1
    feature_groups: Union[str, tuple] = "all"


@dataclass(frozen=True)
class FeatureSpec:
    id: int
    particle: int


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    seed: int
    max_sim_time: float = 120.0
    cloth: ClothConfig = field(default_factory=ClothConfig)
    features: tuple = ()
    targets: Union[str, tuple] = "flat"
    sensor: SensorSection = field(default_factory=SensorSection)
    arm: ArmSection = field(default_factory=ArmSection)
    base: BaseSection = field(default_factory=BaseSection)
    controller: ControllerSection = field(default_factory=ControllerSection)
    bt: BTSection = field(default_factory=BTSection)
    deformation: DeformationRecipe = field(default_factory=DeformationRecipe)

    # -- derived objects --------------------------------------------------------------------------

    def attachments(self) -> list[FeatureAttachment]:
        return [FeatureAttachment(f.id, f.particle, 2) for f in self.features]

    def sensor_model(self, seed: Optional[int] = None) -> SensorModel:
        return SensorModel(self.sensor.noise_stddev, self.seed if seed is None else seed, self.sensor.rate_hz)

    def arm_model(self) -> ArmModel:
        return dataclasses.replace(ArmModel.default(), ee_velocity_limit=self.arm.ee_velocity_limit)

    def target_points(self) -> list[tuple[float, float]]:
        """Per-feature desired (x, y), in feature id order."""
        if self.targets == "flat":
            flat = self.cloth.flat_positions()
            return [(float(flat[f.particle, 0]), float(flat[f.particle, 1])) for f in self.features]
        return [tuple(t) for t in self.targets]

    def feature_groups(self) -> list[tuple[int, ...]]:
        ids = tuple(f.id for f in self.features)
        if self.bt.feature_groups == "all":
            return [ids]
        return [tuple(g) for g in self.bt.feature_groups]

    def with_overrides(self, **kw) -> "ScenarioConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        cloth = dataclasses.asdict(self.cloth)
        cloth["table_extent"] = list(cloth["table_extent"])
        cloth["origin"] = list(cloth["origin"])
        bt = dataclasses.asdict(self.bt)
        bt["grasp_height_bias"] = list(self.bt.grasp_height_bias)
        bt["feature_groups"] = "all" if self.bt.feature_groups == "all" else [list(g) for g in self.bt.feature_groups]
        base = dataclasses.asdict(self.base)
        base["start"] = list(self.base.start)
        base["free_sides"] = list(self.base.free_sides)
        return {
            "name": self.name,
            "seed": self.seed,
            "max_sim_time": self.max_sim_time,
            "cloth": cloth,
            "features": [{"id": f.id, "particle": f.particle} for f in self.features],
            "targets": "flat" if self.targets == "flat" else [list(t) for t in self.targets],
            "sensor": dataclasses.asdict(self.sensor),
            "arm": {"home": list(self.arm.home), "ee_velocity_limit": self.arm.ee_velocity_limit},
            "base": base,
            "controller": dataclasses.asdict(self.controller),
            "bt": bt,
            "deformation": {"kind": self.deformation.kind, "settle_time": self.deformation.settle_time,
                            "params": _plain(self.deformation.params)},
        }


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _freeze(obj):
    """Nested lists to tuples and dicts kept, so recipe params compare by value."""
    if isinstance(obj, dict):
        return {k: _freeze(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return tuple(_freeze(v) for v in obj)
    return obj


def serialize_scenario(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


# --- parsing -------------------------------------------------------------------------------------


class _Locator:
    """Maps key paths such as ``("bt", "retry_count")`` to source line numbers."""

    def __init__(self, node: Optional[yaml.Node], source: str):
        self.root = node
        self.source = source

    def line(self, path: tuple) -> Optional[int]:
        node = self.root
        best = node.start_mark.line + 1 if node is not None else None
        for key in path:
            if isinstance(node, yaml.MappingNode):
                nxt = None
                for k, v in node.value:
                    if k.value == key:
                        best = k.start_mark.line + 1
                        nxt = v
                        break
                node = nxt
            elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
                node = node.value[key]
                best = node.start_mark.line + 1
            else:
                node = None
            if node is None:
                break
        return best

    def error(self, path: tuple, message: str) -> ConfigError:
        return ConfigError(message, ".".join(str(p) for p in path), self.line(path), self.source)


def _section(data: dict, key: str, cls, loc: _Locator, converters: dict):
    raw = data.get(key, {}) or {}
    if not isinstance(raw, dict):
        raise loc.error((key,), "must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in raw.items():
        if k not in names:
            raise loc.error((key, k), f"unknown field (expected one of {sorted(names)})")
        conv = converters.get(k, float)
        try:
            kwargs[k] = conv(v)
        except (TypeError, ValueError) as exc:
            raise loc.error((key, k), f"bad value {v!r}: {exc}") from None
    return cls(**kwargs)


def _int(v):
    if isinstance(v, bool) or int(v) != v:
        raise ValueError("expected an integer")
    return int(v)


def _float_tuple(n: Optional[int] = None):
    def conv(v):
        if not isinstance(v, (list, tuple)):
            raise ValueError("expected a list")
        out = tuple(float(x) for x in v)
        if n is not None and len(out) != n:
            raise ValueError(f"expected {n} numbers, got {len(out)}")
        return out
    return conv


def _str_tuple(v):
    if not isinstance(v, (list, tuple)):
        raise ValueError("expected a list")
    return tuple(str(x) for x in v)


def _groups(v):
    if v == "all":
        return "all"
    if not isinstance(v, (list, tuple)) or not all(isinstance(g, (list, tuple)) and g for g in v):
        raise ValueError("expected 'all' or a list of non-empty feature id lists")
    return tuple(tuple(_int(i) for i in g) for g in v)


def _positive(loc, path, value, allow_zero=False):
    ok = value >= 0 if allow_zero else value > 0
    if not (ok and math.isfinite(value)):
        raise loc.error(path, f"must be {'non-negative' if allow_zero else 'positive'}, got {value}")


def scenario_from_dict(data: Any, source: str = "<dict>", node: Optional[yaml.Node] = None) -> ScenarioConfig:
    loc = _Locator(node, source)
    if not isinstance(data, dict):
        raise loc.error((), "scenario must be a mapping")
    known = {f.name for f in dataclasses.fields(ScenarioConfig)}
    for k in data:
        if k not in known:
            raise loc.error((k,), f"unknown top-level field (expected one of {sorted(known)})")
    for req in ("name", "seed"):
        if req not in data:
            raise loc.error((), f"missing required field {req!r}")
    name = str(data["name"])
    try:
        seed = _int(data["seed"])
    except (TypeError, ValueError):
        raise loc.error(("seed",), f"seed must be an integer, got {data['seed']!r}") from None
    max_sim_time = float(data.get("max_sim_time", 120.0))
    _positive(loc, ("max_sim_time",), max_sim_time)

    # cloth
    raw_cloth = data.get("cloth", {}) or {}
    if not isinstance(raw_cloth, dict):
        raise loc.error(("cloth",), "must be a mapping")
    cloth_fields = {f.name: f for f in dataclasses.fields(ClothConfig)}
    ckw = {}
    for k, v in raw_cloth.items():
        if k not in cloth_fields:
            raise loc.error(("cloth", k), f"unknown field (expected one of {sorted(cloth_fields)})")
        try:
            if k in ("rows", "cols", "substeps_per_control_tick"):
                ckw[k] = _int(v)
            elif k == "table_extent":
                ckw[k] = _float_tuple(4)(v)
            elif k == "origin":
                ckw[k] = _float_tuple(2)(v)
            else:
                ckw[k] = float(v)
        except (TypeError, ValueError) as exc:
            raise loc.error(("cloth", k), f"bad value {v!r}: {exc}") from None
    try:
        cloth = ClothConfig(**ckw)
    except ValueError as exc:
        raise loc.error(("cloth",), str(exc)) from None
    x0, y0, x1, y1 = cloth.table_extent
    flat = cloth.flat_positions()
    if not (x0 <= flat[:, 0].min() and flat[:, 0].max() <= x1 and y0 <= flat[:, 1].min() and flat[:, 1].max() <= y1):
        raise loc.error(("cloth", "origin"), "the flat cloth does not fit on the table")

    # features
    raw_feats = data.get("features")
    if raw_feats is None:
        corners = [(cloth.rows - 1, 0), (cloth.rows - 1, cloth.cols - 1), (0, cloth.cols - 1), (0, 0)]
        feats = tuple(FeatureSpec(i + 1, cloth.index(r, c)) for i, (r, c) in enumerate(corners))
    else:
        if not isinstance(raw_feats, list) or not raw_feats:
            raise loc.error(("features",), "must be a non-empty list")
        feats = []
        for i, f in enumerate(raw_feats):
            if not isinstance(f, dict) or "id" not in f or ("cell" in f) == ("particle" in f):
                raise loc.error(("features", i), "each feature needs an id and exactly one of cell or particle")
            try:
                fid = _int(f["id"])
                if "cell" in f:
                    r, c = (_int(v) for v in f["cell"])
                    particle = cloth.index(r, c)
                else:
                    particle = _int(f["particle"])
            except (TypeError, ValueError, IndexError) as exc:
                raise loc.error(("features", i), str(exc)) from None
            if not 0 <= particle < cloth.n_particles:
                raise loc.error(("features", i), f"particle {particle} outside 0..{cloth.n_particles - 1}")
            feats.append(FeatureSpec(fid, particle))
        ids = sorted(f.id for f in feats)
        if ids != list(range(1, len(ids) + 1)):
            raise loc.error(("features",), f"feature ids must be 1..k without gaps, got {ids}")
        if len({f.particle for f in feats}) != len(feats):
            raise loc.error(("features",), "two features share a particle")
        feats = tuple(sorted(feats, key=lambda f: f.id))

    # targets
    raw_targets = data.get("targets", "flat")
    if raw_targets == "flat":
        targets = "flat"
    else:
        if not isinstance(raw_targets, list) or len(raw_targets) != len(feats):
            raise loc.error(("targets",), f"expected 'flat' or {len(feats)} [x, y] pairs")
        try:
            targets = tuple(_float_tuple(2)(t) for t in raw_targets)
        except (TypeError, ValueError) as exc:
            raise loc.error(("targets",), str(exc)) from None
        for i, (tx, ty) in enumerate(targets):
            if not (x0 <= tx <= x1 and y0 <= ty <= y1):
                raise loc.error(("targets", i), f"target ({tx}, {ty}) lies outside the table extent {cloth.table_extent}")

    sensor = _section(data, "sensor", SensorSection, loc, {})
    _positive(loc, ("sensor", "noise_stddev"), sensor.noise_stddev, allow_zero=True)
    _positive(loc, ("sensor", "rate_hz"), sensor.rate_hz)
    # Nominal rates are accepted within 2 %, e.g. 30 Hz for a 33 ms period.
    if abs(1.0 / sensor.rate_hz - cloth.control_period) > 0.02 / sensor.rate_hz:
        raise loc.error(("sensor", "rate_hz"),
                        f"feature rate {sensor.rate_hz} Hz does not match the control period {cloth.control_period} s")

    arm = _section(data, "arm", ArmSection, loc, {"home": _float_tuple()})
    arm_model = ArmModel.default()
    if len(arm.home) != arm_model.n_joints:
        raise loc.error(("arm", "home"), f"expected {arm_model.n_joints} joint values")
    if not arm_model.within_limits(arm.home):
        raise loc.error(("arm", "home"), "home configuration violates the joint limits")
    _positive(loc, ("arm", "ee_velocity_limit"), arm.ee_velocity_limit)

    base = _section(data, "base", BaseSection, loc, {"start": _float_tuple(3), "free_sides": _str_tuple})
    for k in ("height", "speed", "safe_distance"):
        _positive(loc, ("base", k), getattr(base, k))
    for side in base.free_sides:
        if side not in ("left", "right", "bottom", "top"):
            raise loc.error(("base", "free_sides"), f"unknown side {side!r}")
    sx, sy = base.start[:2]
    if (x0 - base.safe_distance < sx < x1 + base.safe_distance
            and y0 - base.safe_distance < sy < y1 + base.safe_distance):
        raise loc.error(("base", "start"), "start pose lies inside the inflated table footprint")

    controller = _section(data, "controller", ControllerSection, loc, {"jacobian_init": str, "ee_dims": _int})
    if controller.ee_dims not in (2, 3):
        raise loc.error(("controller", "ee_dims"), "must be 2 or 3")
    _positive(loc, ("controller", "gain"), controller.gain)
    if not 0.0 < controller.alpha <= 1.0:
        raise loc.error(("controller", "alpha"), f"alpha must lie in (0, 1], got {controller.alpha}")
    for k in ("convergence_threshold", "max_duration", "ee_speed_cap"):
        _positive(loc, ("controller", k), getattr(controller, k))
    _positive(loc, ("controller", "convergence_hold"), controller.convergence_hold, allow_zero=True)
    if not 0.0 <= controller.smoothing < 1.0:
        raise loc.error(("controller", "smoothing"), "smoothing must lie in [0, 1)")
    if controller.jacobian_init not in ("feature_blocks", "identity"):
        raise loc.error(("controller", "jacobian_init"), "expected feature_blocks or identity")

    bt = _section(data, "bt", BTSection, loc, {"retry_count": _int, "grasp_height_bias": _float_tuple(),
                                               "feature_groups": _groups})
    if bt.retry_count < 1:
        raise loc.error(("bt", "retry_count"), "must be at least 1")
    for k in ("check_window", "check_threshold", "flatten_tolerance", "grasp_tolerance", "approach_speed",
              "check_displacement"):
        _positive(loc, ("bt", k), getattr(bt, k))
    _positive(loc, ("bt", "grasp_offset_range"), bt.grasp_offset_range, allow_zero=True)
    if not bt.grasp_height_bias:
        raise loc.error(("bt", "grasp_height_bias"), "needs at least one entry")
    if bt.feature_groups != "all":
        flat_ids = [i for g in bt.feature_groups for i in g]
        if sorted(flat_ids) != list(range(1, len(feats) + 1)):
            raise loc.error(("bt", "feature_groups"), "groups must partition the feature ids")

    raw_def = data.get("deformation", {}) or {}
    if not isinstance(raw_def, dict):
        raise loc.error(("deformation",), "must be a mapping")
    for k in raw_def:
        if k not in ("kind", "settle_time", "params"):
            raise loc.error(("deformation", k), "unknown field (expected kind, settle_time, params)")
    kind = str(raw_def.get("kind", "none"))
    if kind not in RECIPE_KINDS:
        raise loc.error(("deformation", "kind"), f"unknown recipe {kind!r}; expected one of {RECIPE_KINDS}")
    settle_time = float(raw_def.get("settle_time", 5.0))
    _positive(loc, ("deformation", "settle_time"), settle_time)
    params = raw_def.get("params", {}) or {}
    if not isinstance(params, dict):
        raise loc.error(("deformation", "params"), "must be a mapping")
    recipe = DeformationRecipe(kind, _freeze(params), settle_time)

    return ScenarioConfig(name, seed, max_sim_time, cloth, feats, targets, sensor, arm, base, controller, bt, recipe)


def parse_scenario(text: str, source: str = "<string>") -> ScenarioConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}", "",
                          mark.line + 1 if mark else None, source) from None
    return scenario_from_dict(data, source, node)


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario: {exc.strerror}", source=str(path)) from None
    return parse_scenario(text, str(path))
