"""Deterministic kinematic world: 6-DOF arm, plate of food, human head.

The arm is purely kinematic (velocity integration, first-order torque
response); contact produces sensor wrenches but never pushes the arm around.
All randomness flows from one seeded generator held by the world, split into
independent streams for head noise and acquisition outcomes so changing one
never perturbs the other.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import (
    Pose,
    quat_from_axis_angle,
    quat_from_matrix,
    quat_rotate,
)

CONTROL_DT = 0.01  # 100 Hz control/integration rate

# Mouth location in the head frame: ahead of head center along +x (the face
# normal), slightly below center. The mouth's outward normal is head +x.
MOUTH_OFFSET = np.array([0.09, 0.0, -0.02])


class JointLimitViolation(ValueError):
    def __init__(self, joint_index: int, angle: float = float("nan")):
        self.joint_index = joint_index
        super().__init__(f"joint {joint_index} angle {angle:.4f} outside limits")


class NonFiniteCommand(ValueError):
    pass


class DegenerateAxis(UserWarning):
    """Food major axis is (near) vertical; frame falls back to plate axes."""


@dataclass
class JointDescriptor:
    offset: np.ndarray          # fixed parent-to-joint translation (m)
    axis: np.ndarray            # rotation axis, unit vector in the joint frame
    limit_lo: float             # rad
    limit_hi: float             # rad
    velocity_limit: float       # rad/s
    torque_limit: float         # N*m

    def __post_init__(self):
        self.offset = np.asarray(self.offset, dtype=float).reshape(3)
        self.axis = np.asarray(self.axis, dtype=float).reshape(3)
        n = np.linalg.norm(self.axis)
        if abs(n - 1.0) > 1e-9:
            raise ValueError("joint axis must be a unit vector")
        if not self.limit_lo < self.limit_hi:
            raise ValueError("joint limits must be a nonempty interval")


@dataclass
class ArmModel:
    links: list                 # six JointDescriptor entries, base to wrist
    tool_transform: Pose        # flange to fork tip
    damping: np.ndarray = field(default_factory=lambda: np.full(6, 5.0))

    def __post_init__(self):
        if len(self.links) != 6:
            raise ValueError("arm model needs exactly 6 joints")
        self.damping = np.asarray(self.damping, dtype=float).reshape(6)

    def velocity_limits(self) -> np.ndarray:
        return np.array([l.velocity_limit for l in self.links])

    def torque_limits(self) -> np.ndarray:
        return np.array([l.torque_limit for l in self.links])

    def limits_lo(self) -> np.ndarray:
        return np.array([l.limit_lo for l in self.links])

    def limits_hi(self) -> np.ndarray:
        return np.array([l.limit_hi for l in self.links])

    def check_limits(self, q: np.ndarray):
        for i, link in enumerate(self.links):
            if q[i] < link.limit_lo - 1e-12 or q[i] > link.limit_hi + 1e-12:
                raise JointLimitViolation(i, q[i])


def default_arm_model() -> ArmModel:
    """Reference 6R chain, axes z,y,y,z,y,z, ~0.88 m reach."""
    table = [
        # offset (m)            axis       lo      hi     vel   tau
        ((0.0, 0.0, 0.155), (0, 0, 1), -3.6, 3.6, 1.5, 30.0),
        ((0.0, 0.0, 0.120), (0, 1, 0), -2.4, 2.4, 1.5, 30.0),
        ((0.0, 0.0, 0.300), (0, 1, 0), -2.6, 2.6, 1.5, 30.0),
        ((0.0, 0.0, 0.250), (0, 0, 1), -3.6, 3.6, 2.0, 15.0),
        ((0.0, 0.0, 0.100), (0, 1, 0), -2.2, 2.2, 2.0, 15.0),
        ((0.0, 0.0, 0.080), (0, 0, 1), -3.6, 3.6, 2.5, 10.0),
    ]
    links = [JointDescriptor(np.array(o), np.array(a, dtype=float), lo, hi, v, t)
             for o, a, lo, hi, v, t in table]
    tool = Pose(position=np.array([0.0, 0.0, 0.12]))
    return ArmModel(links=links, tool_transform=tool)


@dataclass
class JointState:
    angles: np.ndarray
    velocities: np.ndarray = field(default_factory=lambda: np.zeros(6))
    torques: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=float).reshape(6)
        self.velocities = np.asarray(self.velocities, dtype=float).reshape(6)
        self.torques = np.asarray(self.torques, dtype=float).reshape(6)

    def copy(self) -> "JointState":
        return JointState(self.angles.copy(), self.velocities.copy(), self.torques.copy())


def _quat_mul_raw(a, b):
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    q = np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])
    return q / np.sqrt(q @ q)


def fk_frames(arm: ArmModel, q: np.ndarray) -> list:
    """Poses of every joint frame plus the fork tip (7 entries), limits checked."""
    from .geometry import quat_rotate as _rot

    q = np.asarray(q, dtype=float).reshape(6)
    arm.check_limits(q)
    frames = []
    pos = np.zeros(3)
    quat = np.array([1.0, 0.0, 0.0, 0.0])
    for link, angle in zip(arm.links, q):
        pos = pos + _rot(quat, link.offset)
        half = 0.5 * angle
        s = np.sin(half)
        ax = link.axis
        joint_q = np.array([np.cos(half), s * ax[0], s * ax[1], s * ax[2]])
        quat = _quat_mul_raw(quat, joint_q)
        frames.append(Pose._fast(pos, quat))
    tool = arm.tool_transform
    frames.append(Pose._fast(pos + _rot(quat, tool.position),
                             _quat_mul_raw(quat, tool.orientation)))
    return frames


def forward_kinematics(arm: ArmModel, q: np.ndarray) -> Pose:
    """Fork-tip pose for joint angles q."""
    return fk_frames(arm, q)[-1]


def flange_pose(arm: ArmModel, q: np.ndarray) -> Pose:
    return fk_frames(arm, q)[-2]


def jacobian(arm: ArmModel, q: np.ndarray, frames: Optional[list] = None) -> np.ndarray:
    """Geometric 6x6 jacobian of the fork tip (linear; angular), world frame.
    A joint's rotation about its own axis leaves that axis fixed, so the
    post-rotation frame orientation maps the axis correctly."""
    if frames is None:
        frames = fk_frames(arm, q)
    tip = frames[-1].position
    J = np.zeros((6, 6))
    for i, link in enumerate(arm.links):
        axis_world = quat_rotate(frames[i].orientation, link.axis)
        arm_vec = tip - frames[i].position
        J[:3, i] = np.cross(axis_world, arm_vec)
        J[3:, i] = axis_world
    return J


@dataclass
class FoodItem:
    id: str
    food_class: str
    pose: Pose
    major_axis: np.ndarray
    size: np.ndarray                       # extents (m), all > 0
    resistance: float                      # N per meter of tine penetration
    ground_truth_success: dict = field(default_factory=dict)  # arm index -> p; sim oracle only

    def __post_init__(self):
        self.major_axis = np.asarray(self.major_axis, dtype=float).reshape(3)
        self.major_axis = self.major_axis / np.linalg.norm(self.major_axis)
        self.size = np.asarray(self.size, dtype=float).reshape(3)
        if np.any(self.size <= 0):
            raise ValueError("food extents must be positive")
        if self.resistance < 0:
            raise ValueError("resistance must be >= 0")
        for p in self.ground_truth_success.values():
            if not 0.0 <= p <= 1.0:
                raise ValueError("success probabilities must lie in [0,1]")

    def radius(self) -> float:
        return 0.5 * float(np.max(self.size))


@dataclass
class BiteBehavior:
    """Scripted user bite: press on the tines after the fork holds still nearby."""
    dwell_s: float = 0.8        # stationary time near the mouth before biting
    force_n: float = 2.0        # press magnitude along tool -z
    press_s: float = 0.15       # press duration before release


@dataclass
class HeadModel:
    base_pose: Pose
    voluntary_amplitudes: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    voluntary_frequencies: np.ndarray = field(default_factory=lambda: np.zeros(0))
    voluntary_phases: np.ndarray = field(default_factory=lambda: np.zeros(0))
    spasm_schedule: list = field(default_factory=list)   # (onset s, displacement 3-vec, decay 1/s)
    noise_std: float = 0.0
    talking_intervals: list = field(default_factory=list)       # [(start, end)]
    mouth_closed_intervals: list = field(default_factory=list)  # [(start, end)]
    bite: Optional[BiteBehavior] = None

    def __post_init__(self):
        self.voluntary_amplitudes = np.asarray(self.voluntary_amplitudes, dtype=float).reshape(-1, 3)
        self.voluntary_frequencies = np.asarray(self.voluntary_frequencies, dtype=float).reshape(-1)
        self.voluntary_phases = np.asarray(self.voluntary_phases, dtype=float).reshape(-1)
        if np.any(self.voluntary_amplitudes < 0):
            raise ValueError("voluntary amplitudes must be >= 0")
        for _, _, decay in self.spasm_schedule:
            if decay <= 0:
                raise ValueError("spasm decay constants must be > 0")

    def voluntary_offset(self, t: float) -> np.ndarray:
        if self.voluntary_frequencies.size == 0:
            return np.zeros(3)
        phases = 2.0 * np.pi * self.voluntary_frequencies * t + self.voluntary_phases
        return np.sin(phases) @ self.voluntary_amplitudes

    def spasm_offset(self, t: float) -> np.ndarray:
        off = np.zeros(3)
        for onset, disp, decay in self.spasm_schedule:
            if t >= onset:
                off = off + np.asarray(disp, dtype=float) * np.exp(-decay * (t - onset))
        return off

    def talking_at(self, t: float) -> bool:
        return any(a <= t < b for a, b in self.talking_intervals)

    def mouth_open_at(self, t: float) -> bool:
        return not any(a <= t < b for a, b in self.mouth_closed_intervals)


@dataclass
class UtensilState:
    """Breakaway fork tip. Once broken it stays broken for the episode."""
    intact: bool = True
    breakaway_threshold: float = 15.0
    break_time: Optional[float] = None

    def __post_init__(self):
        if self.breakaway_threshold <= 0:
            raise ValueError("breakaway threshold must be > 0")


def update_utensil(u: UtensilState, tip_force: float, t: float) -> UtensilState:
    """Latching break: trips on the first sample exceeding the threshold."""
    if tip_force < 0:
        raise ValueError("tip force magnitude must be >= 0")
    if u.intact and tip_force > u.breakaway_threshold:
        u.intact = False
        u.break_time = t
    return u


@dataclass
class WorldState:
    arm_model: ArmModel
    arm: JointState
    plate: list                      # FoodItem entries still on the plate
    head: HeadModel
    utensil: UtensilState
    rng_seed: int
    time: float = 0.0
    tick: int = 0
    plate_center: np.ndarray = field(default_factory=lambda: np.array([0.38, 0.0, 0.0]))
    plate_radius: float = 0.11
    food_on_fork: Optional[str] = None
    consumed: list = field(default_factory=list)
    head_pose: Pose = None           # realized pose, refreshed every step
    mouth_aperture: float = 0.022    # lip-hole radius for incidental contact (m)

    def __post_init__(self):
        self.plate_center = np.asarray(self.plate_center, dtype=float).reshape(3)
        ss = np.random.SeedSequence(self.rng_seed)
        motion_ss, outcome_ss = ss.spawn(2)
        self._rng_motion = np.random.default_rng(motion_ss)
        self._rng_outcomes = np.random.default_rng(outcome_ss)
        if self.head_pose is None:
            self.head_pose = self.realized_head_pose(self.time, noise=False)
        self._fk_cache = fk_frames(self.arm_model, self.arm.angles)
        self._tip_pose = self._fk_cache[-1]
        self._prev_tip_position = self._tip_pose.position.copy()
        self._tip_speed = 0.0
        self._bite_dwell = 0.0
        self._bite_press_left = 0.0
        self._bite_force_tool = np.zeros(3)
        self._pending_attempt = None
        self._raw_tip_force = 0.0
        self.bite_events = []

    # -- head -----------------------------------------------------------------

    def realized_head_pose(self, t: float, noise: bool = True) -> Pose:
        offset = self.head.voluntary_offset(t) + self.head.spasm_offset(t)
        if noise and self.head.noise_std > 0:
            offset = offset + self._rng_motion.normal(0.0, self.head.noise_std, 3)
        return Pose(self.head.base_pose.position + offset,
                    self.head.base_pose.orientation.copy())

    def mouth_pose(self) -> Pose:
        """True mouth pose: head pose composed with the fixed mouth offset."""
        return self.head_pose.compose(Pose(position=MOUTH_OFFSET))

    def mouth_normal(self) -> np.ndarray:
        """Outward face normal (head-frame +x) in world coordinates."""
        return quat_rotate(self.head_pose.orientation, np.array([1.0, 0.0, 0.0]))

    # -- fork / food ----------------------------------------------------------

    def tip_pose(self) -> Pose:
        return self._tip_pose

    def frames(self) -> list:
        """Joint frames + tip for the current configuration (cached per state)."""
        return self._fk_cache

    def set_joint_angles(self, q: np.ndarray):
        """Teleport-style configuration change (setup only, not physics)."""
        self.arm.angles = np.asarray(q, dtype=float).reshape(6)
        self._fk_cache = fk_frames(self.arm_model, self.arm.angles)
        self._tip_pose = self._fk_cache[-1]
        self._prev_tip_position = self._tip_pose.position.copy()

    def tip_speed(self) -> float:
        return self._tip_speed

    def food_by_id(self, food_id: str) -> FoodItem:
        for item in self.plate:
            if item.id == food_id:
                return item
        raise KeyError(f"no food item {food_id!r} on the plate")

    def begin_acquisition_attempt(self, food_id: str, arm_index: int):
        self.food_by_id(food_id)
        self._pending_attempt = (food_id, arm_index)

    def cancel_acquisition_attempt(self):
        self._pending_attempt = None

    def resolve_acquisition(self) -> bool:
        """Draw the attempt outcome; on success the food attaches to the fork."""
        if self._pending_attempt is None:
            raise RuntimeError("no acquisition attempt in progress")
        food_id, arm_index = self._pending_attempt
        self._pending_attempt = None
        item = self.food_by_id(food_id)
        p = float(item.ground_truth_success.get(arm_index, 0.5))
        success = bool(self._rng_outcomes.random() < p)
        if success:
            self.plate = [f for f in self.plate if f.id != food_id]
            self.food_on_fork = food_id
        return success

    # -- contact model ---------------------------------------------------------

    def contact_wrench(self) -> tuple:
        """(force, torque) at the F/T sensor in the tool frame, plus raw tip-force
        magnitude before breakaway transmission. Linear-spring penetration model;
        not physical beyond threshold logic."""
        tip = self._tip_pose.position
        force_world = np.zeros(3)

        for item in self.plate:
            delta = tip - item.pose.position
            dist = float(np.sqrt(delta @ delta))
            pen = item.radius() - dist
            if pen > 0 and dist > 1e-9:
                force_world = force_world + item.resistance * pen * (delta / dist)

        # Lip contact: lateral spring when the tip is in the mouth corridor but
        # off-axis beyond the aperture.
        mouth = self.mouth_pose().position
        normal = self.mouth_normal()
        rel = tip - mouth
        axial = float(rel @ normal)
        lateral_vec = rel - axial * normal
        lateral = float(np.sqrt(lateral_vec @ lateral_vec))
        if abs(axial) < 0.06 and lateral > self.mouth_aperture:
            k_lip = 150.0
            force_world = force_world - k_lip * (lateral - self.mouth_aperture) * (lateral_vec / lateral)

        # Express in the tool frame; add any active bite press (already tool frame).
        q_tool = self._tip_pose.orientation
        q_world_to_tool = np.array([q_tool[0], -q_tool[1], -q_tool[2], -q_tool[3]])
        force_tool = quat_rotate(q_world_to_tool, force_world) + self._bite_force_tool

        raw_magnitude = float(np.sqrt(force_tool @ force_tool))
        lever = self.arm_model.tool_transform.position
        torque_tool = np.cross(lever, force_tool)
        if not self.utensil.intact:
            return np.zeros(3), np.zeros(3), raw_magnitude
        return force_tool, torque_tool, raw_magnitude

    def _update_bite(self, dt: float):
        # A bite needs food on the fork, so consuming the food is itself the
        # refractory mechanism; no extra timer needed.
        bite = self.head.bite
        if bite is None:
            return
        if self._bite_press_left > 0.0:
            self._bite_press_left -= dt
            if self._bite_press_left <= 0.0:
                self._bite_force_tool = np.zeros(3)
                if self.food_on_fork is not None:
                    self.consumed.append(self.food_on_fork)
                    self.food_on_fork = None
                self.bite_events.append(self.time)
                self._bite_dwell = 0.0
            return
        near = np.linalg.norm(self._tip_pose.position - self.mouth_pose().position) < 0.07
        still = self._tip_speed < 0.02
        if near and still and self.food_on_fork is not None:
            self._bite_dwell += dt
            if self._bite_dwell >= bite.dwell_s:
                self._bite_press_left = bite.press_s
                self._bite_force_tool = np.array([0.0, 0.0, -bite.force_n])
        else:
            self._bite_dwell = 0.0

    def state_digest(self) -> dict:
        """Serializable snapshot of the mutable physical state (for determinism
        comparisons and telemetry)."""
        return {
            "time": round(self.time, 9),
            "tick": self.tick,
            "q": self.arm.angles.tolist(),
            "v": self.arm.velocities.tolist(),
            "head": self.head_pose.position.tolist(),
            "tip": self._tip_pose.position.tolist(),
            "plate": sorted(f.id for f in self.plate),
            "food_on_fork": self.food_on_fork,
            "utensil_intact": self.utensil.intact,
        }


def step_world(w: WorldState, commanded: np.ndarray, dt: float, mode: str = "velocity") -> WorldState:
    """Advance one tick. mode 'velocity': q += v*dt; mode 'torque': first-order
    velocity response v = tau/damping. Joint angles are clipped to limits."""
    if not (0.0 < dt <= 0.1):
        raise ValueError(f"dt must be in (0, 0.1], got {dt}")
    commanded = np.asarray(commanded, dtype=float).reshape(6)
    if not np.all(np.isfinite(commanded)):
        raise NonFiniteCommand(f"command contains non-finite entries: {commanded}")

    vel_lim = w.arm_model.velocity_limits()
    if mode == "velocity":
        v = np.clip(commanded, -vel_lim, vel_lim)
        w.arm.torques = np.zeros(6)
    elif mode == "torque":
        tau = np.clip(commanded, -w.arm_model.torque_limits(), w.arm_model.torque_limits())
        v = np.clip(tau / w.arm_model.damping, -vel_lim, vel_lim)
        w.arm.torques = tau
    else:
        raise ValueError(f"unknown command mode {mode!r}")

    q_prev = w.arm.angles.copy()
    q_new = np.clip(q_prev + v * dt, w.arm_model.limits_lo(), w.arm_model.limits_hi())
    w.arm.angles = q_new
    w.arm.velocities = (q_new - q_prev) / dt

    w.time += dt
    w.tick += 1
    w.head_pose = w.realized_head_pose(w.time)

    prev_tip = w._tip_pose.position
    w._fk_cache = fk_frames(w.arm_model, w.arm.angles)
    w._tip_pose = w._fk_cache[-1]
    w._tip_speed = float(np.linalg.norm(w._tip_pose.position - prev_tip)) / dt

    w._update_bite(dt)
    _, _, raw = w.contact_wrench()
    w._raw_tip_force = raw
    update_utensil(w.utensil, raw, w.time)
    return w


def food_frame(item: FoodItem) -> Pose:
    """Frame at the food: x along the major axis projected to the plate plane,
    z up. Near-vertical axes fall back to the plate x-axis with a warning."""
    x = item.major_axis - np.array([0.0, 0.0, item.major_axis[2]])
    n = np.linalg.norm(x)
    if n < 1e-6:
        warnings.warn(f"food {item.id}: major axis near vertical, using plate x-axis",
                      DegenerateAxis)
        x = np.array([1.0, 0.0, 0.0])
    else:
        x = x / n
    z = np.array([0.0, 0.0, 1.0])
    y = np.cross(z, x)
    rot = np.column_stack([x, y, z])
    return Pose(item.pose.position.copy(), quat_from_matrix(rot))


def approach_frame(food: Pose, offset: np.ndarray, pitch: float, roll: float) -> Pose:
    """Food frame composed with the schema's approach offset and orientation
    (pitch about food y, then roll about food x)."""
    offset = np.asarray(offset, dtype=float).reshape(3)
    if np.linalg.norm(offset) > 0.3:
        raise ValueError("approach offset magnitude must be <= 0.3 m")
    tilt = Pose(orientation=quat_from_axis_angle(np.array([0.0, 1.0, 0.0]), pitch)).compose(
        Pose(orientation=quat_from_axis_angle(np.array([1.0, 0.0, 0.0]), roll)))
    return food.compose(Pose(position=offset, orientation=tilt.orientation))


# -- differential kinematics -------------------------------------------------

def ik_solve(arm: ArmModel, target: Pose, q0: np.ndarray, pos_tol: float = 1e-4,
             rot_tol: float = 1e-3, max_iters: int = 200, orientation: bool = True,
             align_axis: Optional[np.ndarray] = None) -> np.ndarray:
    """Damped-least-squares IK from seed q0. orientation=False solves position
    only; align_axis instead constrains the tool z-axis to that direction."""
    from .geometry import rotation_vector_between

    q = np.asarray(q0, dtype=float).copy()
    lo, hi = arm.limits_lo(), arm.limits_hi()
    lam2 = 0.01
    for _ in range(max_iters):
        pose = forward_kinematics(arm, q)
        e_pos = target.position - pose.position
        if orientation:
            e_rot = rotation_vector_between(pose.orientation, target.orientation)
        elif align_axis is not None:
            z_now = quat_rotate(pose.orientation, np.array([0.0, 0.0, 1.0]))
            e_rot = np.cross(z_now, align_axis / np.linalg.norm(align_axis))
        else:
            e_rot = np.zeros(3)
        if np.linalg.norm(e_pos) < pos_tol and np.linalg.norm(e_rot) < rot_tol:
            return q
        err = np.concatenate([e_pos, e_rot])
        J = jacobian(arm, q)
        if not orientation and align_axis is None:
            J = J[:3]
            err = err[:3]
        dq = J.T @ np.linalg.solve(J @ J.T + lam2 * np.eye(J.shape[0]), err)
        step = np.clip(dq, -0.2, 0.2)
        q = np.clip(q + step, lo, hi)
    pose = forward_kinematics(arm, q)
    if np.linalg.norm(target.position - pose.position) < 5 * pos_tol:
        return q
    raise ValueError(f"IK failed to converge to {target.position}")
