"""Initial cloth deformations applied before a run starts."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..cloth import ClothConfig, ClothSim, ClothState

SETTLE_SPEED = 1e-4
RECIPE_KINDS = ("none", "shifted", "folded_edge", "corner_tuck", "scripted")


@dataclass(frozen=True)
class Move:
    """Kinematic drag of a particle set by ``displacement`` (metres) over the recipe duration."""

    particles: tuple[int, ...]
    displacement: tuple[float, float, float]


@dataclass(frozen=True)
class DeformationRecipe:
    kind: str = "none"
    params: dict = field(default_factory=dict)
    settle_time: float = 5.0

    def __post_init__(self):
        if self.kind not in RECIPE_KINDS:
            raise ValueError(f"unknown deformation recipe {self.kind!r}; expected one of {RECIPE_KINDS}")
        if self.settle_time <= 0:
            raise ValueError("settle_time must be positive")


class RecipeError(RuntimeError):
    pass


def select_particles(cfg: ClothConfig, selector) -> tuple[int, ...]:
    """Resolve a particle selector: a list of indices, or a mapping with ``cols``/``rows``/``particles``.

    Negative row and column numbers count from the far edge.
    """
    if isinstance(selector, (list, tuple)):
        idx = [int(i) for i in selector]
    else:
        idx = [int(i) for i in selector.get("particles", [])]
        for c in selector.get("cols", []):
            c = c % cfg.cols
            idx += [cfg.index(r, c) for r in range(cfg.rows)]
        for r in selector.get("rows", []):
            r = r % cfg.rows
            idx += [cfg.index(r, c) for c in range(cfg.cols)]
    for i in idx:
        if not 0 <= i < cfg.n_particles:
            raise RecipeError(f"particle index {i} outside 0..{cfg.n_particles - 1}")
    return tuple(sorted(set(idx)))


def _smoothstep(a: float) -> float:
    return a * a * (3.0 - 2.0 * a)


def scripted_drag(sim: ClothSim, state: ClothState, moves: list[Move], anchors: tuple[int, ...],
                  duration: float) -> ClothState:
    """Drag particle sets along smooth ramps while ``anchors`` are held in place."""
    cfg = sim.config
    st = state.copy()
    starts = [st.positions[list(m.particles)].copy() for m in moves]
    anchor_pos = st.positions[list(anchors)].copy()
    n = max(1, int(round(duration / cfg.dt)))
    for i in range(n):
        a = _smoothstep((i + 1) / n)
        st = sim.step(st, None)
        for m, p0 in zip(moves, starts):
            idx = list(m.particles)
            st.positions[idx] = p0 + a * np.asarray(m.displacement)
            st.velocities[idx] = 0.0
        if anchors:
            st.positions[list(anchors)] = anchor_pos
            st.velocities[list(anchors)] = 0.0
    return st


def _shifted(sim, state, p):
    st = state.copy()
    st.positions[:, 0] += float(p.get("dx", 0.0))
    st.positions[:, 1] += float(p.get("dy", 0.0))
    return st


def _folded_edge(sim, state, p):
    """Fold the last ``fraction`` of columns back over the cloth about a vertical crease."""
    cfg = sim.config
    frac = float(p["fraction"])
    if not 0.0 < frac < 1.0:
        raise RecipeError("folded_edge fraction must lie in (0, 1)")
    st = state.copy()
    dx, _ = cfg.spacing
    crease_col = int(round((1.0 - frac) * (cfg.cols - 1)))
    crease_x = cfg.origin[0] + crease_col * dx
    cols = np.arange(cfg.n_particles) % cfg.cols
    flap = cols > crease_col
    st.positions[flap, 0] = 2.0 * crease_x - st.positions[flap, 0]
    st.positions[flap, 2] = cfg.table_height + 0.004
    return st


def _corner_tuck(sim, state, p, corners):
    """Push a corner feature ``depth`` metres toward the cloth centre."""
    cfg = sim.config
    fid = int(p["feature_id"])
    depth = float(p["depth"])
    if fid not in corners:
        raise RecipeError(f"corner_tuck feature {fid} has no attachment")
    pi = corners[fid]
    centre = state.positions[:, :2].mean(axis=0)
    direction = centre - state.positions[pi, :2]
    direction /= np.linalg.norm(direction)
    move = Move((pi,), (depth * direction[0], depth * direction[1], 0.0))
    return scripted_drag(sim, state, [move], (), float(p.get("duration", 2.0)))


def _scripted(sim, state, p):
    """Sequential drags; each move may name its own ``anchors``, else the recipe-level set applies."""
    cfg = sim.config
    default_anchors = p.get("anchors", [])
    st = state
    for m in p["moves"]:
        move = Move(select_particles(cfg, m["select"]),
                    tuple(float(v) for v in (list(m["displacement"]) + [0.0])[:3]))
        anchors = select_particles(cfg, m.get("anchors", default_anchors))
        if set(move.particles) & set(anchors):
            raise RecipeError("a particle cannot be both dragged and anchored")
        st = scripted_drag(sim, st, [move], anchors, float(p.get("duration", 3.0)))
    return st


def apply_recipe(sim: ClothSim, state: ClothState, recipe: DeformationRecipe,
                 corner_particles: Optional[dict] = None) -> ClothState:
    """Deform a flat cloth and let it come to rest.

    Raises :class:`RecipeError` if the cloth is still moving after ``settle_time``.
    """
    p = recipe.params
    if recipe.kind == "none":
        st = state.copy()
    elif recipe.kind == "shifted":
        st = _shifted(sim, state, p)
    elif recipe.kind == "folded_edge":
        st = _folded_edge(sim, state, p)
    elif recipe.kind == "corner_tuck":
        st = _corner_tuck(sim, state, p, corner_particles or {})
    else:
        st = _scripted(sim, state, p)
    if recipe.kind != "none":
        st = sim.settle(st, max_time=recipe.settle_time, speed_threshold=SETTLE_SPEED, min_time=0.5)
        if st.max_speed() >= SETTLE_SPEED:
            raise RecipeError(f"cloth still moving at {st.max_speed():.2e} m/s after {recipe.settle_time} s")
    # The run's clock and noise stream start at zero regardless of the recipe length.
    st.velocities[:] = 0.0
    st.step_count = 0
    return st
