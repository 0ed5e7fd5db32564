"""Rigid-body poses and unit-quaternion helpers.

Quaternions use (w, x, y, z) ordering. Every composition renormalizes so the
unit-norm invariant survives arbitrarily long chains (drift stays < 1e-9).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

QUAT_NORM_TOL = 1e-9


def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("cannot normalize zero/non-finite quaternion")
    return q / n


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b, renormalized."""
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    out = np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])
    return quat_normalize(out)


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        raise ValueError("rotation axis must be nonzero")
    axis = axis / n
    half = 0.5 * angle
    return np.concatenate(([np.cos(half)], np.sin(half) * axis))


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector v by quaternion q (active rotation)."""
    w, x, y, z = q
    v0, v1, v2 = float(v[0]), float(v[1]), float(v[2])
    # q * (0,v) * q_conj expanded with inline cross products (hot path)
    t0 = 2.0 * (y * v2 - z * v1)
    t1 = 2.0 * (z * v0 - x * v2)
    t2 = 2.0 * (x * v1 - y * v0)
    return np.array([
        v0 + w * t0 + (y * t2 - z * t1),
        v1 + w * t1 + (z * t0 - x * t2),
        v2 + w * t2 + (x * t1 - y * t0),
    ])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_angle_between(a: np.ndarray, b: np.ndarray) -> float:
    """Geodesic angle (radians) between two unit quaternions."""
    d = abs(float(np.dot(a, b)))
    return 2.0 * np.arccos(min(1.0, d))


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Shepperd's method; m must be a proper rotation matrix."""
    m = np.asarray(m, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = np.array([(m[2, 1] - m[1, 2]) / s,
                      0.25 * s,
                      (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = np.array([(m[0, 2] - m[2, 0]) / s,
                      (m[0, 1] + m[1, 0]) / s,
                      0.25 * s,
                      (m[1, 2] + m[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = np.array([(m[1, 0] - m[0, 1]) / s,
                      (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s,
                      0.25 * s])
    return quat_normalize(q)


def rotation_vector_between(q_from: np.ndarray, q_to: np.ndarray) -> np.ndarray:
    """Axis-angle (as a 3-vector) taking q_from to q_to, in the world frame."""
    dq = quat_multiply(q_to, quat_conjugate(q_from))
    if dq[0] < 0.0:
        dq = -dq
    w = min(1.0, max(-1.0, float(dq[0])))
    angle = 2.0 * np.arccos(w)
    s = np.sqrt(max(0.0, 1.0 - w * w))
    if s < 1e-9:
        return np.zeros(3)
    return angle * dq[1:] / s


@dataclass
class Pose:
    """Position (m) + orientation (unit quaternion, wxyz)."""

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=quat_identity)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.orientation = np.asarray(self.orientation, dtype=float).reshape(4)
        if not np.all(np.isfinite(self.position)):
            raise ValueError("pose position must be finite")
        n = float(np.sqrt(self.orientation @ self.orientation))
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"quaternion norm {n} too far from 1")
        if abs(n - 1.0) > QUAT_NORM_TOL:
            self.orientation = self.orientation / n

    @classmethod
    def _fast(cls, position: np.ndarray, orientation: np.ndarray) -> "Pose":
        """Construction bypassing validation; callers guarantee a unit
        quaternion and finite position (hot kinematics path)."""
        p = cls.__new__(cls)
        p.position = position
        p.orientation = orientation
        return p

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply other in self's frame."""
        return Pose(
            position=self.position + quat_rotate(self.orientation, other.position),
            orientation=quat_multiply(self.orientation, other.orientation),
        )

    def inverse(self) -> "Pose":
        inv_q = quat_conjugate(self.orientation)
        return Pose(position=-quat_rotate(inv_q, self.position), orientation=inv_q)

    def transform_point(self, p: np.ndarray) -> np.ndarray:
        return self.position + quat_rotate(self.orientation, p)

    def copy(self) -> "Pose":
        return Pose(self.position.copy(), self.orientation.copy())

    def to_dict(self) -> dict:
        return {"position": self.position.tolist(), "orientation": self.orientation.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "Pose":
        return Pose(np.asarray(d["position"]), np.asarray(d["orientation"]))

    def almost_equal(self, other: "Pose", pos_tol=1e-9, ang_tol=1e-9) -> bool:
        return (np.linalg.norm(self.position - other.position) <= pos_tol
                and quat_angle_between(self.orientation, other.orientation) <= ang_tol)
