"""Model-free deformation control with an online Broyden estimate of the deformation Jacobian.

The task value is ``y = r(s)``, a selection of feature coordinates. The
end-effector velocity command is ``u = pinv(J_hat) K (y* - y)``. After every
tick the estimate receives the rank-one secant correction

    J_hat <- J_hat + alpha * (dy - J_hat dx) dx^T / (dx^T dx)

using the observed task increment ``dy`` and end-effector increment ``dx``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Protocol, Sequence

import numpy as np

from .cloth import FeatureVector

MIN_DX_NORM = 1e-5
# Relative singular-value floor below which the pseudoinverse is damped.
RANK_TOLERANCE = 1e-6
PINV_DAMPING = 1e-3


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class TaskFunction:
    """Linear coordinate selection ``y = s[selector]`` with target ``y*``."""

    selector: tuple[int, ...]
    target: np.ndarray

    def __post_init__(self):
        sel = tuple(int(i) for i in self.selector)
        object.__setattr__(self, "selector", sel)
        object.__setattr__(self, "target", np.asarray(self.target, dtype=float))
        if len(set(sel)) != len(sel):
            raise ConfigurationError(f"task selector has repeated indices: {sel}")
        if any(i < 0 for i in sel):
            raise ConfigurationError("task selector indices must be non-negative")
        if self.target.shape != (len(sel),):
            raise ConfigurationError(f"target has shape {self.target.shape}, expected ({len(sel)},)")

    @property
    def m(self) -> int:
        return len(self.selector)

    def selection_matrix(self, n: int) -> np.ndarray:
        """dr/ds as a 0/1 matrix of shape (m, n)."""
        S = np.zeros((self.m, n))
        S[np.arange(self.m), self.selector] = 1.0
        return S

    @classmethod
    def for_features(cls, feature_ids: Sequence[int], d: int, targets: np.ndarray) -> "TaskFunction":
        """Select every coordinate of the given 1-based features; ``targets`` is the full stacked s_dsr."""
        sel = [(f - 1) * d + j for f in feature_ids for j in range(d)]
        return cls(tuple(sel), np.asarray(targets, dtype=float)[sel])


def evaluate_task(s, task: TaskFunction) -> np.ndarray:
    values = s.values if isinstance(s, FeatureVector) else np.asarray(s, dtype=float)
    if task.selector and max(task.selector) >= len(values):
        raise ConfigurationError(
            f"task selects coordinate {max(task.selector)} but the feature vector has {len(values)}")
    return values[list(task.selector)]


def task_error(y, target) -> float:
    y = np.asarray(y, dtype=float)
    target = np.asarray(target, dtype=float)
    if y.shape != target.shape:
        raise ValueError(f"task value {y.shape} and target {target.shape} differ in shape")
    return float(np.linalg.norm(target - y))


@dataclass(frozen=True)
class JacobianEstimate:
    J_hat: np.ndarray
    alpha: float = 0.1
    min_dx_norm: float = MIN_DX_NORM
    step_index: int = 0
    fault: bool = False

    def __post_init__(self):
        J = np.array(self.J_hat, dtype=float)
        J.setflags(write=False)
        object.__setattr__(self, "J_hat", J)
        if J.ndim != 2:
            raise ValueError("J_hat must be a matrix")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not np.all(np.isfinite(J)):
            raise ValueError("J_hat has non-finite entries")

    @property
    def shape(self) -> tuple[int, int]:
        return self.J_hat.shape

    @classmethod
    def identity(cls, m: int, p: int, **kwargs) -> "JacobianEstimate":
        """m x p matrix with ones on the main diagonal."""
        return cls(np.eye(m, p), **kwargs)

    @classmethod
    def feature_blocks(cls, n_features: int, d: int, p: int, **kwargs) -> "JacobianEstimate":
        """Stack of one d x p identity block per feature (each feature follows the gripper one-to-one)."""
        return cls(np.vstack([np.eye(d, p)] * n_features), **kwargs)


def broyden_update(est: JacobianEstimate, dy, dx) -> JacobianEstimate:
    """Rank-one secant correction of ``est`` from one observed increment pair.

    Updates with ``||dx|| < est.min_dx_norm`` leave the estimate unchanged.
    Non-finite increments are rejected and set ``fault``.
    """
    dy = np.asarray(dy, dtype=float)
    dx = np.asarray(dx, dtype=float)
    m, p = est.shape
    if dy.shape != (m,) or dx.shape != (p,):
        raise ValueError(f"increments must be ({m},) and ({p},), got {dy.shape} and {dx.shape}")
    if not (np.all(np.isfinite(dy)) and np.all(np.isfinite(dx))):
        return replace(est, fault=True)
    dx_sq = float(dx @ dx)
    if math.sqrt(dx_sq) < est.min_dx_norm:
        return est
    innovation = dy - est.J_hat @ dx
    J = est.J_hat + est.alpha * np.outer(innovation, dx) / dx_sq
    if not np.all(np.isfinite(J)):
        return replace(est, fault=True)
    return replace(est, J_hat=J, step_index=est.step_index + 1, fault=False)


@dataclass(frozen=True)
class ControllerConfig:
    K: np.ndarray
    convergence_threshold: float = 0.032
    convergence_hold: float = 1.0
    max_duration: float = 120.0
    ee_speed_cap: float = 0.05
    # Exponential smoothing weight on measured task values (0 disables).
    smoothing: float = 0.0

    def __post_init__(self):
        K = np.atleast_2d(np.asarray(self.K, dtype=float))
        object.__setattr__(self, "K", K)
        if K.shape[0] != K.shape[1]:
            raise ValueError("gain matrix must be square")
        if not np.allclose(K, K.T):
            raise ValueError("gain matrix must be symmetric")
        if np.min(np.linalg.eigvalsh(K)) <= 0:
            raise ValueError("gain matrix must be positive definite")
        if self.ee_speed_cap <= 0 or self.convergence_threshold <= 0:
            raise ValueError("speed cap and convergence threshold must be positive")
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError("smoothing must lie in [0, 1)")

    @classmethod
    def scalar_gain(cls, gain: float, m: int, **kwargs) -> "ControllerConfig":
        return cls(K=gain * np.eye(m), **kwargs)


@dataclass(frozen=True)
class ControlCommand:
    u: np.ndarray
    degraded: bool = False
    saturated: bool = False


def pseudo_inverse(J: np.ndarray) -> tuple[np.ndarray, bool]:
    """Left, right or plain inverse of ``J`` picked by shape, damped when rank-deficient.

    Returns the inverse and whether damping was needed.
    """
    m, p = J.shape
    s = np.linalg.svd(J, compute_uv=False)
    scale = s[0] if len(s) and s[0] > 0 else 1.0
    degraded = len(s) == 0 or s[-1] <= RANK_TOLERANCE * scale
    if degraded:
        # SVD form of the damped inverse; stays defined when the entries underflow.
        U, S, Vt = np.linalg.svd(J, full_matrices=False)
        denom = S**2 + (PINV_DAMPING * scale) ** 2
        gains = np.divide(S, denom, out=np.zeros_like(S), where=denom > 0)
        return (Vt.T * gains) @ U.T, True
    if m > p:
        return np.linalg.solve(J.T @ J, J.T), False
    if m < p:
        return J.T @ np.linalg.inv(J @ J.T), False
    return np.linalg.inv(J), False


def control_step(est: JacobianEstimate, y, cfg: ControllerConfig, target) -> ControlCommand:
    """u = pinv(J_hat) K (y* - y), with the speed clamped to ``cfg.ee_speed_cap``."""
    y = np.asarray(y, dtype=float)
    target = np.asarray(target, dtype=float)
    m, _ = est.shape
    if y.shape != (m,) or target.shape != (m,) or cfg.K.shape != (m, m):
        raise ValueError(f"estimate is {est.shape} but y, y*, K have shapes {y.shape}, {target.shape}, {cfg.K.shape}")
    J_pinv, degraded = pseudo_inverse(est.J_hat)
    u = J_pinv @ (cfg.K @ (target - y))
    if not np.all(np.isfinite(u)):
        return ControlCommand(np.zeros(est.shape[1]), degraded=True)
    speed = float(np.linalg.norm(u))
    saturated = speed > cfg.ee_speed_cap
    if saturated:
        u = u * (cfg.ee_speed_cap / speed)
    return ControlCommand(u, degraded, saturated)


# --- closed loop ---------------------------------------------------------------------------------


class Outcome(str, Enum):
    CONVERGED = "converged"
    TIMEOUT = "timeout"
    GRASP_LOST = "grasp_lost"


@dataclass
class ControlRecord:
    step_index: int
    sim_time: float
    s: np.ndarray
    y: np.ndarray
    target: np.ndarray
    task_error: float
    u: np.ndarray
    dx_norm: float
    update_accepted: bool


class Plant(Protocol):
    """What the closed loop needs from the world it manipulates."""

    time: float
    period: float

    def measure(self) -> FeatureVector: ...

    def ee_position(self) -> np.ndarray: ...

    def grasped(self) -> bool: ...

    def apply_ee_velocity(self, u: np.ndarray) -> None: ...


class DeformationController:
    """Tick-by-tick Broyden/pseudoinverse loop; one instance per grasp."""

    def __init__(self, task: TaskFunction, cfg: ControllerConfig, est: JacobianEstimate):
        if est.shape[0] != task.m:
            raise ValueError(f"estimate has {est.shape[0]} rows but the task has m = {task.m}")
        self.task = task
        self.cfg = cfg
        self.est = est
        self.records: list[ControlRecord] = []
        self.start_time: Optional[float] = None
        self.below_since: Optional[float] = None
        self._prev_y: Optional[np.ndarray] = None
        self._prev_x: Optional[np.ndarray] = None
        self._smoothed: Optional[np.ndarray] = None

    def tick(self, s: FeatureVector, x: np.ndarray, now: float) -> tuple[Optional[Outcome], np.ndarray]:
        """Consume one measurement and return (finished outcome or None, velocity command)."""
        if self.start_time is None:
            self.start_time = now
        y_raw = evaluate_task(s, self.task)
        if self.cfg.smoothing > 0 and self._smoothed is not None:
            y = self.cfg.smoothing * self._smoothed + (1.0 - self.cfg.smoothing) * y_raw
        else:
            y = y_raw
        self._smoothed = y
        x = np.asarray(x, dtype=float)

        accepted = False
        dx_norm = 0.0
        if self._prev_y is not None:
            dx = x - self._prev_x
            dx_norm = float(np.linalg.norm(dx))
            before = self.est.step_index
            self.est = broyden_update(self.est, y - self._prev_y, dx)
            accepted = self.est.step_index > before
        self._prev_y, self._prev_x = y, x.copy()

        err = task_error(y, self.task.target)
        if err < self.cfg.convergence_threshold:
            if self.below_since is None:
                self.below_since = now
        else:
            self.below_since = None

        outcome = None
        if self.below_since is not None and now - self.below_since >= self.cfg.convergence_hold - 1e-9:
            outcome = Outcome.CONVERGED
        elif now - self.start_time >= self.cfg.max_duration - 1e-9:
            outcome = Outcome.TIMEOUT
        if outcome is None:
            u = control_step(self.est, y, self.cfg, self.task.target).u
        else:
            u = np.zeros(self.est.shape[1])
        self.records.append(ControlRecord(len(self.records), now, s.values.copy(), y.copy(),
                                          self.task.target.copy(), err, u.copy(), dx_norm, accepted))
        return outcome, u

    @property
    def convergence_time(self) -> Optional[float]:
        return self.below_since


@dataclass
class ControlResult:
    outcome: Outcome
    records: list
    estimate: JacobianEstimate
    convergence_time: Optional[float] = None

    @property
    def errors(self) -> np.ndarray:
        return np.array([r.task_error for r in self.records])


def run_deformation_control(plant: Plant, task: TaskFunction, cfg: ControllerConfig,
                            est: JacobianEstimate) -> ControlResult:
    """Close the loop on ``plant`` until convergence, timeout or loss of the grasp."""
    ctrl = DeformationController(task, cfg, est)
    while True:
        if not plant.grasped():
            return ControlResult(Outcome.GRASP_LOST, ctrl.records, ctrl.est)
        outcome, u = ctrl.tick(plant.measure(), plant.ee_position(), plant.time)
        if outcome is not None:
            conv = ctrl.convergence_time if outcome is Outcome.CONVERGED else None
            return ControlResult(outcome, ctrl.records, ctrl.est, conv)
        plant.apply_ee_velocity(u)


class LinearPlant:
    """Synthetic plant ``s = J_true x + s0`` (optionally noisy) for exercising the loop."""

    def __init__(self, J_true, s0=None, x0=None, period: float = 1.0 / 30.0, d: int = 2,
                 noise_stddev: float = 0.0, seed: int = 0):
        self.J_true = np.asarray(J_true, dtype=float)
        m, p = self.J_true.shape
        self.s0 = np.zeros(m) if s0 is None else np.asarray(s0, dtype=float)
        self.x = np.zeros(p) if x0 is None else np.asarray(x0, dtype=float).copy()
        self.period = period
        self.d = d
        self.tick_index = 0
        self.noise_stddev = noise_stddev
        self._rng = np.random.default_rng(seed)

    @property
    def time(self) -> float:
        return self.tick_index * self.period

    def measure(self) -> FeatureVector:
        s = self.J_true @ self.x + self.s0
        if self.noise_stddev > 0:
            s = s + self._rng.normal(0.0, self.noise_stddev, size=s.shape)
        m = len(s)
        d = self.d if m % self.d == 0 else 1
        return FeatureVector(s, d, m // d, self.time)

    def ee_position(self) -> np.ndarray:
        return self.x.copy()

    def grasped(self) -> bool:
        return True

    def apply_ee_velocity(self, u) -> None:
        self.x = self.x + self.period * np.asarray(u, dtype=float)
        self.tick_index += 1
