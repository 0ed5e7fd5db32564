"""Controller stack: trapezoidal retiming, trajectory tracking, force-gated
velocity control, torque-limited compliance, and the exclusive manager.

Gating uses Euclidean wrench norms (direction-agnostic, conservative). A
tripped or stale gate latches until re-armed. Retiming stretches a normalized
trapezoid so the total duration scales exactly as 1/speed_scale.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .sensors import ForceTorqueReading
from .world import CONTROL_DT, ArmModel, forward_kinematics

DEFAULT_F_MAX = 4.0    # N
DEFAULT_TAU_MAX = 4.0  # N*m


class EmptyPath(ValueError):
    pass


class InvalidScale(ValueError):
    pass


class SwitchWhileEstopped(RuntimeError):
    pass


class PlanningBlocked(RuntimeError):
    pass


@dataclass(frozen=True)
class GateConfig:
    f_max: float = DEFAULT_F_MAX
    tau_max: float = DEFAULT_TAU_MAX

    def __post_init__(self):
        if not (np.isfinite(self.f_max) and self.f_max > 0):
            raise ValueError("f_max must be positive and finite")
        if not (np.isfinite(self.tau_max) and self.tau_max > 0):
            raise ValueError("tau_max must be positive and finite")


@dataclass
class ImpedanceGains:
    stiffness: np.ndarray
    damping: np.ndarray
    torque_limit: np.ndarray

    def __post_init__(self):
        self.stiffness = np.asarray(self.stiffness, dtype=float).reshape(6)
        self.damping = np.asarray(self.damping, dtype=float).reshape(6)
        self.torque_limit = np.asarray(self.torque_limit, dtype=float).reshape(6)
        if np.any(self.stiffness <= 0) or np.any(self.damping <= 0) or np.any(self.torque_limit <= 0):
            raise ValueError("impedance gains must be strictly positive")


def default_gains() -> ImpedanceGains:
    return ImpedanceGains(stiffness=np.full(6, 30.0), damping=np.full(6, 2.0),
                          torque_limit=np.full(6, 8.0))


@dataclass
class TimedTrajectory:
    """Breakpoints (t, q, v) with piecewise-linear velocity between them."""
    waypoints: list                     # [(t, q(6,), v(6,))]
    speed_scale: float = 1.0

    def __post_init__(self):
        if not self.waypoints:
            raise EmptyPath("trajectory needs at least one waypoint")
        times = [t for t, _, _ in self.waypoints]
        if abs(times[0]) > 1e-12:
            raise ValueError("trajectory must start at t=0")
        if any(b - a <= 0 for a, b in zip(times, times[1:])):
            raise ValueError("waypoint times must be strictly increasing")

    @property
    def duration(self) -> float:
        return self.waypoints[-1][0]

    def end_position(self) -> np.ndarray:
        return self.waypoints[-1][1]

    def sample(self, t: float):
        """(q, v) at time t; clamps outside [0, duration]."""
        wp = self.waypoints
        if t <= 0.0:
            return wp[0][1].copy(), np.zeros(6)
        if t >= self.duration:
            return wp[-1][1].copy(), np.zeros(6)
        for i in range(len(wp) - 1):
            t0, q0, v0 = wp[i]
            t1, _, v1 = wp[i + 1]
            if t0 <= t < t1:
                h = t - t0
                seg = t1 - t0
                a = (v1 - v0) / seg
                return q0 + v0 * h + 0.5 * a * h * h, v0 + a * h
        return wp[-1][1].copy(), np.zeros(6)


def retime_trajectory(path: list, vel_limits: np.ndarray, acc_limits: np.ndarray,
                      speed_scale: float = 1.0) -> TimedTrajectory:
    """Trapezoidal retiming of a joint-space path. Each segment accelerates,
    cruises, and stops at the next waypoint; joints are synchronized through a
    shared normalized profile so no joint exceeds its scaled limits."""
    if len(path) < 2:
        raise EmptyPath("need at least 2 waypoints")
    if not (0.0 < speed_scale <= 1.0):
        raise InvalidScale(f"speed_scale must be in (0, 1], got {speed_scale}")
    vel_limits = np.asarray(vel_limits, dtype=float).reshape(6)
    acc_limits = np.asarray(acc_limits, dtype=float).reshape(6)

    waypoints = []
    t_base = 0.0
    q_prev = np.asarray(path[0], dtype=float).reshape(6)

    def push(t, q, v):
        if waypoints and abs(t - waypoints[-1][0]) < 1e-12:
            return
        waypoints.append((t, np.asarray(q, dtype=float), np.asarray(v, dtype=float)))

    for raw in path[1:]:
        q_next = np.asarray(raw, dtype=float).reshape(6)
        dq = q_next - q_prev
        move = np.abs(dq)
        if np.max(move) < 1e-12:
            continue
        active = move > 1e-12
        s_vel = float(np.min(vel_limits[active] * speed_scale / move[active]))
        s_acc = float(np.min(acc_limits[active] * speed_scale ** 2 / move[active]))

        if np.isinf(s_acc):
            duration = 1.0 / s_vel
            push(t_base, q_prev, s_vel * dq)
            push(t_base + duration, q_next, s_vel * dq)
        else:
            t_ramp = s_vel / s_acc
            s_ramp = 0.5 * s_acc * t_ramp ** 2
            if 2.0 * s_ramp >= 1.0:
                t_ramp = float(np.sqrt(1.0 / s_acc))
                peak = s_acc * t_ramp
                push(t_base, q_prev, np.zeros(6))
                push(t_base + t_ramp, q_prev + 0.5 * dq, peak * dq)
                push(t_base + 2 * t_ramp, q_next, np.zeros(6))
                duration = 2 * t_ramp
            else:
                t_cruise = (1.0 - 2.0 * s_ramp) / s_vel
                push(t_base, q_prev, np.zeros(6))
                push(t_base + t_ramp, q_prev + s_ramp * dq, s_vel * dq)
                push(t_base + t_ramp + t_cruise, q_prev + (1 - s_ramp) * dq, s_vel * dq)
                push(t_base + 2 * t_ramp + t_cruise, q_next, np.zeros(6))
                duration = 2 * t_ramp + t_cruise
        t_base += duration
        q_prev = q_next

    if not waypoints:
        return TimedTrajectory([(0.0, q_prev, np.zeros(6))], speed_scale)

    traj = TimedTrajectory(waypoints, speed_scale)
    for _, _, v in traj.waypoints:
        if np.any(np.abs(v) > vel_limits * speed_scale + 1e-9):
            raise AssertionError("retimed velocity exceeds scaled limit")
    return traj


# -- force gating ---------------------------------------------------------------

def gate_check(ft: ForceTorqueReading, gate: GateConfig) -> Optional[str]:
    """Trip reason for a single reading, or None."""
    if ft.force_norm() > gate.f_max:
        return "force"
    if ft.torque_norm() > gate.tau_max:
        return "torque"
    return None


class GatedVelocityController:
    """Velocity pass-through that aborts (and latches) on wrench-norm trips or
    stale readings. Stale = reading older than 2 control periods."""

    def __init__(self, gate: GateConfig = GateConfig(), control_period: float = CONTROL_DT):
        self.gate = gate
        self.control_period = control_period
        self.tripped: Optional[str] = None

    def tick(self, cmd: np.ndarray, ft: Optional[ForceTorqueReading], now: float):
        """Returns (command, trip_reason). After a trip every command is zero
        until rearm()."""
        cmd = np.asarray(cmd, dtype=float).reshape(6)
        if not np.all(np.isfinite(cmd)):
            raise ValueError("gated velocity command must be finite")
        if self.tripped is None:
            if ft is None or now - ft.timestamp > 2.0 * self.control_period + 1e-12:
                self.tripped = "stale"
            else:
                self.tripped = gate_check(ft, self.gate)
        if self.tripped is not None:
            return np.zeros(6), self.tripped
        return cmd, None

    def rearm(self, gate: Optional[GateConfig] = None):
        if gate is not None:
            self.gate = gate
        self.tripped = None


def tick_gated_velocity(cmd: np.ndarray, ft: Optional[ForceTorqueReading],
                        gate: GateConfig, now: Optional[float] = None):
    """Single-shot gate decision: (command, trip_reason)."""
    ctrl = GatedVelocityController(gate)
    return ctrl.tick(cmd, ft, now if now is not None else (ft.timestamp if ft else 0.0))


# -- compliant control -----------------------------------------------------------

def tick_compliant(q: np.ndarray, v: np.ndarray, target_q: np.ndarray,
                   target_v: np.ndarray, gains: ImpedanceGains) -> np.ndarray:
    """Joint impedance law with per-joint torque clamping (clamp is last)."""
    q = np.asarray(q, dtype=float).reshape(6)
    v = np.asarray(v, dtype=float).reshape(6)
    target_q = np.asarray(target_q, dtype=float).reshape(6)
    target_v = np.asarray(target_v, dtype=float).reshape(6)
    if not all(np.all(np.isfinite(x)) for x in (q, v, target_q, target_v)):
        raise ValueError("compliant inputs must be finite")
    tau = gains.stiffness * (target_q - q) + gains.damping * (target_v - v)
    return np.clip(tau, -gains.torque_limit, gains.torque_limit)


class CompliantController:
    def __init__(self, gains: Optional[ImpedanceGains] = None):
        self.gains = gains or default_gains()
        self.target_q = np.zeros(6)
        self.target_v = np.zeros(6)

    def set_target(self, target_q: np.ndarray, target_v: Optional[np.ndarray] = None):
        self.target_q = np.asarray(target_q, dtype=float).reshape(6)
        self.target_v = (np.zeros(6) if target_v is None
                         else np.asarray(target_v, dtype=float).reshape(6))

    def tick(self, q: np.ndarray, v: np.ndarray) -> np.ndarray:
        return tick_compliant(q, v, self.target_q, self.target_v, self.gains)


# -- trajectory tracking ----------------------------------------------------------

class TrajectoryTracker:
    """Velocity commands that land exactly on the retimed reference at each
    tick: v = (q_ref(t+dt) - q) / dt, clipped to joint velocity limits."""

    def __init__(self, traj: TimedTrajectory, vel_limits: np.ndarray,
                 dt: float = CONTROL_DT):
        self.traj = traj
        self.vel_limits = np.asarray(vel_limits, dtype=float).reshape(6)
        self.dt = dt
        self.elapsed = 0.0

    def done(self, q: np.ndarray) -> bool:
        return (self.elapsed >= self.traj.duration - 1e-12
                and np.max(np.abs(q - self.traj.end_position())) < 1e-6)

    def tick(self, q: np.ndarray) -> np.ndarray:
        self.elapsed += self.dt
        q_ref, _ = self.traj.sample(self.elapsed)
        v = (q_ref - q) / self.dt
        return np.clip(v, -self.vel_limits, self.vel_limits)


# -- manager ----------------------------------------------------------------------

class ControllerKind(enum.Enum):
    IDLE = "idle"
    TRAJECTORY = "trajectory"
    GATED_VELOCITY = "gated_velocity"
    COMPLIANT = "compliant"


@dataclass
class ControllerManagerState:
    active: ControllerKind = ControllerKind.IDLE
    switch_count: int = 0
    locked: bool = False
    zero_pending: bool = False   # one zero command emitted on deactivation


def switch_controller(mgr: ControllerManagerState, target: ControllerKind) -> ControllerManagerState:
    """Deactivate-then-activate; refused while the safety lock is held."""
    if mgr.locked:
        raise SwitchWhileEstopped("controller switch refused: safety shutdown active")
    if target != mgr.active:
        if mgr.active != ControllerKind.IDLE:
            mgr.zero_pending = True
        mgr.active = target
        mgr.switch_count += 1
    return mgr


def lock_manager(mgr: ControllerManagerState):
    mgr.locked = True
    mgr.active = ControllerKind.IDLE
    mgr.zero_pending = True


def unlock_manager(mgr: ControllerManagerState):
    mgr.locked = False


# -- naive planning ----------------------------------------------------------------

def plan_joint_path(arm: ArmModel, q_start: np.ndarray, q_goal: np.ndarray,
                    obstacles: list, samples: int = 25) -> list:
    """Joint-space straight line, checked against sphere obstacles at the fork
    tip; one lifted via-point retry when blocked."""
    q_start = np.asarray(q_start, dtype=float).reshape(6)
    q_goal = np.asarray(q_goal, dtype=float).reshape(6)

    def clear(qa, qb):
        for s in np.linspace(0.0, 1.0, samples):
            tip = forward_kinematics(arm, qa + s * (qb - qa)).position
            for center, radius in obstacles:
                if np.linalg.norm(tip - np.asarray(center)) < radius:
                    return False
        return True

    if clear(q_start, q_goal):
        return [q_start, q_goal]

    from .geometry import Pose
    from .world import ik_solve
    mid_tip = 0.5 * (forward_kinematics(arm, q_start).position
                     + forward_kinematics(arm, q_goal).position)
    lifted = Pose(position=mid_tip + np.array([0.0, 0.0, 0.18]))
    q_via = ik_solve(arm, lifted, 0.5 * (q_start + q_goal), orientation=False)
    if clear(q_start, q_via) and clear(q_via, q_goal):
        return [q_start, q_via, q_goal]
    raise PlanningBlocked("no collision-free path found")
