"""Mass-spring cloth lying on a table, with a kinematic point grasp and a noisy feature sensor.

The cloth is a ``rows x cols`` particle grid joined by structural (4-neighbour),
shear (diagonal) and bend (2-hop) springs and advanced with semi-implicit Euler.
Particles resting on the table top feel a stick-slip friction model. The
simulator is the ground truth the controller only ever observes through
:func:`measure_features`.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

PENETRATION_TOLERANCE = 1e-6
# Tangential speed below which a table particle is considered at rest.
_STICK_SPEED = 1e-6


class ClothError(Exception):
    """Base class for cloth simulation errors."""


class SimulationDiverged(ClothError):
    def __init__(self, particle_index: int, step_count: int):
        super().__init__(
            f"cloth simulation diverged: particle {particle_index} is non-finite "
            f"after physics step {step_count}"
        )
        self.particle_index = particle_index
        self.step_count = step_count


class GraspError(ClothError):
    """Raised when a grasp precondition is violated."""


@dataclass(frozen=True)
class ClothConfig:
    width: float = 0.72
    height: float = 0.35
    rows: int = 9
    cols: int = 19
    particle_mass: float = 0.001
    stiffness_structural: float = 60.0
    stiffness_shear: float = 5.0
    stiffness_bend: float = 10.0
    # Fraction of the spring stiffness applied when a spring is shorter than rest.
    compression_scale: float = 0.1
    # Cap on the compressive force of any spring (cloth buckles instead of pushing), N.
    buckling_force: float = 0.005
    damping: float = 0.01
    table_height: float = 0.28
    # (x_min, y_min, x_max, y_max) of the table top, metres.
    table_extent: tuple[float, float, float, float] = (0.0, 0.0, 0.8, 0.9)
    # Lower-left corner of the flat cloth on the table, metres.
    origin: tuple[float, float] = (0.04, 0.45)
    friction_static_threshold: float = 0.01
    friction_kinetic_coeff: float = 0.8
    gravity: float = 9.81
    dt: float = 0.001
    substeps_per_control_tick: int = 33

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise ValueError(f"cloth grid must be at least 2x2, got {self.rows}x{self.cols}")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("cloth width and height must be positive")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.substeps_per_control_tick < 1:
            raise ValueError("substeps_per_control_tick must be >= 1")
        if self.particle_mass <= 0:
            raise ValueError("particle_mass must be positive")
        x0, y0, x1, y1 = self.table_extent
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"degenerate table extent {self.table_extent}")

    @property
    def n_particles(self) -> int:
        return self.rows * self.cols

    @property
    def spacing(self) -> tuple[float, float]:
        """Rest spacing along x (columns) and y (rows)."""
        return self.width / (self.cols - 1), self.height / (self.rows - 1)

    @property
    def control_period(self) -> float:
        return self.dt * self.substeps_per_control_tick

    def index(self, row: int, col: int) -> int:
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise IndexError(f"grid cell ({row}, {col}) outside {self.rows}x{self.cols}")
        return row * self.cols + col

    def cell(self, index: int) -> tuple[int, int]:
        return divmod(index, self.cols)

    def flat_positions(self) -> np.ndarray:
        dx, dy = self.spacing
        rr, cc = np.divmod(np.arange(self.n_particles), self.cols)
        pos = np.empty((self.n_particles, 3))
        pos[:, 0] = self.origin[0] + cc * dx
        pos[:, 1] = self.origin[1] + rr * dy
        pos[:, 2] = self.table_height
        return pos


@dataclass(frozen=True)
class Grasp:
    particle_index: int
    offset: np.ndarray  # grasped particle = ee_position + offset


@dataclass
class ClothState:
    positions: np.ndarray
    velocities: np.ndarray
    grasp: Optional[Grasp] = None
    step_count: int = 0

    def copy(self) -> "ClothState":
        return ClothState(self.positions.copy(), self.velocities.copy(), self.grasp, self.step_count)

    def kinetic_energy(self, particle_mass: float) -> float:
        return 0.5 * particle_mass * float(np.sum(self.velocities**2))

    def max_speed(self) -> float:
        return float(np.max(np.linalg.norm(self.velocities, axis=1)))


@dataclass(frozen=True)
class FeatureAttachment:
    feature_id: int
    particle_index: int
    dims: int = 2


@dataclass(frozen=True)
class SensorModel:
    noise_stddev: float = 0.002
    seed: int = 0
    rate_hz: float = 30.0

    def __post_init__(self):
        if self.noise_stddev < 0:
            raise ValueError("noise_stddev must be >= 0")


@dataclass
class FeatureVector:
    """Stacked feature coordinates ``[s_1, ..., s_k]`` with ``d`` coordinates each."""

    values: np.ndarray
    d: int
    k: int
    timestamp: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.d * self.k,):
            raise ValueError(f"feature vector length {self.values.shape} != d*k = {self.d * self.k}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature vector has non-finite entries")

    def point(self, feature_id: int) -> np.ndarray:
        """Coordinates of a 1-based feature."""
        i = feature_id - 1
        return self.values[i * self.d:(i + 1) * self.d]

    def points(self) -> np.ndarray:
        return self.values.reshape(self.k, self.d)


def validate_attachments(attachments: Sequence[FeatureAttachment], n_particles: int) -> None:
    if not attachments:
        raise ValueError("at least one feature attachment is required")
    ids = sorted(a.feature_id for a in attachments)
    if ids != list(range(1, len(ids) + 1)):
        raise ValueError(f"feature ids must be unique and contiguous from 1, got {ids}")
    dims = {a.dims for a in attachments}
    if len(dims) != 1 or not dims <= {2, 3}:
        raise ValueError(f"all features must report the same dims (2 or 3), got {sorted(dims)}")
    for a in attachments:
        if not 0 <= a.particle_index < n_particles:
            raise ValueError(f"feature {a.feature_id}: particle index {a.particle_index} out of range")


def _build_springs(cfg: ClothConfig):
    dx, dy = cfg.spacing
    diag = float(np.hypot(dx, dy))
    i_list, j_list, rest, k = [], [], [], []

    def add(r0, c0, r1, c1, length, stiffness):
        if 0 <= r1 < cfg.rows and 0 <= c1 < cfg.cols and stiffness > 0:
            i_list.append(r0 * cfg.cols + c0)
            j_list.append(r1 * cfg.cols + c1)
            rest.append(length)
            k.append(stiffness)

    for r in range(cfg.rows):
        for c in range(cfg.cols):
            add(r, c, r, c + 1, dx, cfg.stiffness_structural)
            add(r, c, r + 1, c, dy, cfg.stiffness_structural)
            add(r, c, r + 1, c + 1, diag, cfg.stiffness_shear)
            add(r, c, r + 1, c - 1, diag, cfg.stiffness_shear)
            add(r, c, r, c + 2, 2 * dx, cfg.stiffness_bend)
            add(r, c, r + 2, c, 2 * dy, cfg.stiffness_bend)
    return (np.array(i_list), np.array(j_list), np.array(rest), np.array(k, dtype=float))


class ClothSim:
    """Stateless stepping of :class:`ClothState` for a fixed :class:`ClothConfig`.

    One instance can be shared by several states; it holds only the spring
    topology derived from the configuration.
    """

    def __init__(self, config: ClothConfig):
        self.config = config
        self.spring_i, self.spring_j, self.rest, self.k = _build_springs(config)
        self._n = config.n_particles

    def initial_state(self) -> ClothState:
        pos = self.config.flat_positions()
        return ClothState(pos, np.zeros_like(pos))

    def on_table(self, positions: np.ndarray) -> np.ndarray:
        x0, y0, x1, y1 = self.config.table_extent
        return ((positions[:, 0] >= x0) & (positions[:, 0] <= x1)
                & (positions[:, 1] >= y0) & (positions[:, 1] <= y1))

    def spring_forces(self, positions: np.ndarray) -> np.ndarray:
        d = positions[self.spring_j] - positions[self.spring_i]
        length = np.sqrt(np.einsum("ij,ij->i", d, d))
        stretch = length - self.rest
        k = np.where(stretch < 0.0, self.k * self.config.compression_scale, self.k)
        tension = np.maximum(k * stretch, -self.config.buckling_force)
        with np.errstate(invalid="ignore", divide="ignore"):
            mag = np.where(length > 0.0, tension / length, 0.0)
        f = d * mag[:, None]
        out = np.empty((self._n, 3))
        for axis in range(3):
            out[:, axis] = (np.bincount(self.spring_i, f[:, axis], self._n)
                            - np.bincount(self.spring_j, f[:, axis], self._n))
        return out

    def step(self, state: ClothState, ee_position: Optional[np.ndarray], dt: Optional[float] = None) -> ClothState:
        """Advance one physics step; the grasped particle is pinned to ``ee_position + offset``."""
        cfg = self.config
        dt = cfg.dt if dt is None else dt
        if not dt > 0:
            raise ValueError(f"dt must be positive, got {dt}")
        m = cfg.particle_mass
        x = state.positions
        v = state.velocities

        force = self.spring_forces(x)
        force[:, 2] -= m * cfg.gravity
        force -= cfg.damping * v

        # Table contact: particles lying on the top surface receive a normal force
        # cancelling any downward load, plus stick-slip friction.
        contact = self.on_table(x) & (x[:, 2] <= cfg.table_height + PENETRATION_TOLERANCE)
        normal = np.where(contact, np.maximum(-force[:, 2], 0.0), 0.0)
        force[:, 2] += normal

        v_new = v + dt * force / m
        if np.any(contact):
            c = np.flatnonzero(contact)
            ft = np.hypot(force[c, 0], force[c, 1])
            vt = v_new[c, :2]
            speed = np.hypot(vt[:, 0], vt[:, 1])
            old_speed = np.hypot(v[c, 0], v[c, 1])
            stick = (ft < cfg.friction_static_threshold) & (old_speed < _STICK_SPEED)
            # Coulomb kinetic friction removes at most the available tangential speed.
            loss = cfg.friction_kinetic_coeff * normal[c] * dt / m
            with np.errstate(invalid="ignore", divide="ignore"):
                scale = np.where(speed > 0.0, np.maximum(0.0, 1.0 - loss / speed), 0.0)
            scale = np.where(stick, 0.0, scale)
            v_new[c, :2] = vt * scale[:, None]
            v_new[c, 2] = np.maximum(v_new[c, 2], 0.0)

        x_new = x + dt * v_new

        # Non-penetration of the table top.
        inside = self.on_table(x_new)
        below = inside & (x_new[:, 2] < cfg.table_height)
        if np.any(below):
            x_new[below, 2] = cfg.table_height
            v_new[below, 2] = np.maximum(v_new[below, 2], 0.0)

        grasp = state.grasp
        if grasp is not None:
            if ee_position is None:
                raise GraspError("a grasped cloth needs an end-effector position to step")
            g = grasp.particle_index
            pinned = np.asarray(ee_position, dtype=float) + grasp.offset
            v_new[g] = (pinned - x[g]) / dt
            x_new[g] = pinned

        bad = ~np.all(np.isfinite(x_new), axis=1)
        if np.any(bad):
            raise SimulationDiverged(int(np.flatnonzero(bad)[0]), state.step_count + 1)
        return ClothState(x_new, v_new, grasp, state.step_count + 1)

    def settle(self, state: ClothState, ee_position=None, max_time: float = 10.0,
               speed_threshold: float = 1e-4, min_time: float = 0.0) -> ClothState:
        """Step until every particle is slower than ``speed_threshold`` (or ``max_time`` elapses)."""
        n_max = int(np.ceil(max_time / self.config.dt))
        n_min = int(np.ceil(min_time / self.config.dt))
        for i in range(n_max):
            state = self.step(state, ee_position)
            if i + 1 >= n_min and state.max_speed() < speed_threshold:
                break
        return state

    def attach_grasp(self, state: ClothState, ee_position, grasp_tolerance: float) -> Optional[ClothState]:
        """Pin the particle nearest to the end-effector, or return ``None`` if it is out of reach."""
        if state.grasp is not None:
            raise GraspError(f"particle {state.grasp.particle_index} is already grasped")
        ee = np.asarray(ee_position, dtype=float)
        dist = np.linalg.norm(state.positions - ee, axis=1)
        i = int(np.argmin(dist))
        if dist[i] > grasp_tolerance:
            return None
        return replace(state, grasp=Grasp(i, state.positions[i] - ee))

    @staticmethod
    def release_grasp(state: ClothState) -> ClothState:
        if state.grasp is None:
            return state
        return replace(state, grasp=None)


def measure_features(state: ClothState, attachments: Sequence[FeatureAttachment],
                     sensor: SensorModel, timestamp: float = 0.0) -> FeatureVector:
    """Read the attached particles and add zero-mean Gaussian noise.

    The noise stream is keyed on ``(sensor.seed, state.step_count)`` so repeated
    reads of the same state agree while successive ticks see fresh noise.
    """
    if not attachments:
        raise ValueError("at least one feature attachment is required")
    ordered = sorted(attachments, key=lambda a: a.feature_id)
    d = ordered[0].dims
    idx = [a.particle_index for a in ordered]
    values = state.positions[idx, :d].reshape(-1).copy()
    if sensor.noise_stddev > 0:
        rng = np.random.default_rng([sensor.seed, state.step_count])
        values += rng.normal(0.0, sensor.noise_stddev, size=values.shape)
    return FeatureVector(values, d, len(ordered), timestamp)
