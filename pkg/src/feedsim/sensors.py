"""Simulated sensing: wrist F/T with connectivity faults, breakaway utensil
transmission, and two in-hand cameras with cone-based utensil occlusion.

Sensor noise is a pure function of (world seed, tick, stream id), so reads are
side-effect free on the world and identical snapshots yield identical
observations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import Pose, quat_from_axis_angle
from .world import UtensilState, WorldState, flange_pose, update_utensil  # noqa: F401  (re-exported surface)

FORCE_NOISE_STD = 0.05      # N
TORQUE_NOISE_STD = 0.005    # N*m
CAMERA_POS_NOISE_STD = 0.003  # m
OCCLUSION_HALF_ANGLE = np.deg2rad(10.0)
CONFIDENCE_SCALE = 0.5      # m; confidence = exp(-distance/scale)

_FT_STREAM = 1
_CAMERA_STREAM_BASE = 100


class Disconnected(RuntimeError):
    """F/T sensor offline; consumers must treat this as a safety violation."""


@dataclass
class ForceTorqueReading:
    force: np.ndarray
    torque: np.ndarray
    timestamp: float
    seq: int

    def __post_init__(self):
        self.force = np.asarray(self.force, dtype=float).reshape(3)
        self.torque = np.asarray(self.torque, dtype=float).reshape(3)
        if not (np.all(np.isfinite(self.force)) and np.all(np.isfinite(self.torque))):
            raise ValueError("wrench components must be finite")

    def force_norm(self) -> float:
        return float(np.linalg.norm(self.force))

    def torque_norm(self) -> float:
        return float(np.linalg.norm(self.torque))

    def to_record(self) -> dict:
        return {"seq": self.seq, "t": self.timestamp,
                "f": self.force.tolist(), "tau": self.torque.tolist()}


@dataclass
class SensorHealth:
    connected: bool = True
    last_reading_time: float = 0.0


@dataclass
class CameraObservation:
    camera_id: int
    mouth_pose_estimate: Optional[Pose]
    confidence: float
    occluded: bool
    timestamp: float

    def __post_init__(self):
        if self.occluded and self.mouth_pose_estimate is not None:
            raise ValueError("occluded observations cannot carry an estimate")
        if self.mouth_pose_estimate is None and self.confidence != 0.0:
            raise ValueError("confidence must be 0 without an estimate")


def _stream_rng(w: WorldState, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([w.rng_seed & 0x7FFFFFFF, w.tick, stream]))


class FTSensor:
    """Wrist force/torque source with a monotone sequence counter."""

    def __init__(self, health: Optional[SensorHealth] = None,
                 noise_force: float = FORCE_NOISE_STD,
                 noise_torque: float = TORQUE_NOISE_STD):
        self.health = health or SensorHealth()
        self.noise_force = noise_force
        self.noise_torque = noise_torque
        self.seq = 0

    def read(self, w: WorldState) -> ForceTorqueReading:
        if not self.health.connected:
            raise Disconnected("force/torque sensor not connected")
        force, torque, _ = w.contact_wrench()
        if self.noise_force > 0 or self.noise_torque > 0:
            rng = _stream_rng(w, _FT_STREAM)
            force = force + rng.normal(0.0, self.noise_force, 3)
            torque = torque + rng.normal(0.0, self.noise_torque, 3)
        self.seq += 1
        self.health.last_reading_time = w.time
        return ForceTorqueReading(force, torque, w.time, self.seq)


def read_force_torque(w: WorldState, health: SensorHealth,
                      noise_force: float = FORCE_NOISE_STD, seq: int = 0) -> ForceTorqueReading:
    """One-shot functional form of FTSensor.read."""
    if not health.connected:
        raise Disconnected("force/torque sensor not connected")
    sensor = FTSensor(health, noise_force=noise_force)
    sensor.seq = seq
    return sensor.read(w)


@dataclass
class CameraRig:
    """Two cameras fixed to the wrist flange, yawed outward so at least one
    usually sees past the utensil."""
    offsets: tuple = ((0.045, 0.0, 0.0), (-0.045, 0.0, 0.0))
    yaws: tuple = (np.deg2rad(30.0), np.deg2rad(-30.0))
    half_angle: float = OCCLUSION_HALF_ANGLE
    pos_noise_std: float = CAMERA_POS_NOISE_STD

    def camera_pose(self, w: WorldState, camera_id: int) -> Pose:
        fl = w.frames()[-2]
        local = Pose(position=np.asarray(self.offsets[camera_id], dtype=float),
                     orientation=quat_from_axis_angle(np.array([0.0, 0.0, 1.0]),
                                                      self.yaws[camera_id]))
        return fl.compose(local)


DEFAULT_RIG = CameraRig()


_SEG_SAMPLES = np.linspace(0.0, 1.0, 12)[:, None]


def _segment_blocks_sight(cam: np.ndarray, mouth: np.ndarray, seg_a: np.ndarray,
                          seg_b: np.ndarray, half_angle: float) -> bool:
    """True if any sampled point of segment [a,b] lies inside the sight cone
    from cam toward mouth, strictly between the two."""
    d = mouth - cam
    dist = float(np.sqrt(d @ d))
    if dist < 1e-9:
        return True
    d_hat = d / dist
    pts = seg_a + _SEG_SAMPLES * (seg_b - seg_a)     # (12, 3)
    v = pts - cam
    proj = v @ d_hat
    vn = np.sqrt((v * v).sum(axis=1))
    between = (proj > 1e-3) & (proj < dist)
    if np.any(between & (vn < 1e-9)):
        return True
    with np.errstate(invalid="ignore", divide="ignore"):
        cos_angle = np.where(vn > 1e-12, proj / vn, 1.0)
    return bool(np.any(between & (cos_angle > np.cos(half_angle))))


def observe_mouth(w: WorldState, camera_id: int, rig: CameraRig = DEFAULT_RIG,
                  force_occluded: bool = False) -> CameraObservation:
    """Pose-level mouth observation from one in-hand camera. Occluded when the
    utensil segment crosses the camera-to-mouth sight cone."""
    if camera_id not in (0, 1):
        raise ValueError("camera_id must be 0 or 1")
    cam = rig.camera_pose(w, camera_id).position
    mouth = w.mouth_pose()
    fl = w.frames()[-2]
    tip = w.tip_pose().position

    occluded = force_occluded or _segment_blocks_sight(
        cam, mouth.position, fl.position, tip, rig.half_angle)
    if occluded:
        return CameraObservation(camera_id, None, 0.0, True, w.time)

    distance = float(np.linalg.norm(mouth.position - cam))
    confidence = float(np.exp(-distance / CONFIDENCE_SCALE))
    est_pos = mouth.position
    if rig.pos_noise_std > 0:
        rng = _stream_rng(w, _CAMERA_STREAM_BASE + camera_id)
        est_pos = est_pos + rng.normal(0.0, rig.pos_noise_std, 3)
    estimate = Pose(est_pos, mouth.orientation.copy())
    return CameraObservation(camera_id, estimate, confidence, False, w.time)
