"""Bite transfer: multi-camera mouth fusion, likely-range outlier rejection,
spasm detection biased toward false positives, readiness gating, interaction
classification, and the hand-off phase policy.

Classification is a transparent rule set so the safety asymmetry stays
auditable; every threshold lives on TransferConfig or a named constant.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import Pose, quat_normalize
from .sensors import CameraObservation, ForceTorqueReading

NO_CONTACT_EPS = 0.2          # N: below this the window counts as contact-free
BITE_SUSTAIN_S = 0.1          # press must hold this long to count as a bite
MANIPULATION_FORCE = 0.5      # N lateral, sustained, inside the mouth
CLASSIFY_WINDOW_S = 0.2
SPASM_BASELINE_S = 0.06       # finite-difference lag for spasm speeds
SPASM_SMOOTH_S = 0.09         # trailing boxcar for noise suppression
COMMIT_RANGE = 0.08           # m: inside this range the utensil inevitably
                              # occludes a point-mouth model, so the approach
                              # commits to the last accepted estimate
STILLNESS_S = 0.3             # quiet time required after a spasm before resuming
ABSENCE_WINDOW_S = 0.5        # persistent-estimate-loss threshold
ARRIVE_TOL = 0.008            # m, staging/waypoint arrival
HANDOFF_TOL = 0.004           # m, final hand-off placement

OUT_OF_RANGE = "out_of_range"
IMPLAUSIBLE_JUMP = "implausible_jump"


class InsufficientHistory(ValueError):
    pass


class WindowTooShort(ValueError):
    pass


class InteractionClass(enum.Enum):
    NO_CONTACT = "no_contact"
    INCIDENTAL = "incidental"
    INVOLUNTARY = "involuntary"
    IN_MOUTH_MANIPULATION = "in_mouth_manipulation"
    INTENTIONAL_BITE = "intentional_bite"


class TransferPhase(enum.Enum):
    APPROACH_STAGING = "approach_staging"
    WAIT_READY = "wait_ready"
    APPROACH_MOUTH = "approach_mouth"
    IN_MOUTH = "in_mouth"
    OUTSIDE_HOLD = "outside_hold"
    RETRACT = "retract"
    DONE = "done"
    ABORTED = "aborted"


@dataclass
class MouthEstimate:
    pose: Pose
    confidence: float
    timestamp: float
    sources: frozenset

    def __post_init__(self):
        if self.confidence <= 0:
            raise ValueError("fused estimate must have positive confidence")
        if not self.sources:
            raise ValueError("fused estimate needs at least one source")


@dataclass
class LikelyRange:
    center: np.ndarray
    half_extents: np.ndarray
    max_speed: float = 1.0     # m/s

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        self.half_extents = np.asarray(self.half_extents, dtype=float).reshape(3)
        if np.any(self.half_extents <= 0):
            raise ValueError("half extents must be positive")

    def contains(self, p: np.ndarray) -> bool:
        return bool(np.all(np.abs(np.asarray(p) - self.center) <= self.half_extents))

    @staticmethod
    def calibrate(samples: list, margin: float = 0.15, max_speed: float = 1.0) -> "LikelyRange":
        """Box around observed still-head positions, padded by margin."""
        pts = np.asarray(samples, dtype=float)
        center = pts.mean(axis=0)
        spread = np.abs(pts - center).max(axis=0)
        return LikelyRange(center, spread + margin, max_speed)


@dataclass
class ReadinessState:
    ready: bool
    reason: Optional[str] = None   # mouth_closed | talking | no_estimate

    def __post_init__(self):
        if not self.ready and self.reason not in ("mouth_closed", "talking", "no_estimate"):
            raise ValueError(f"invalid not-ready reason {self.reason!r}")


@dataclass
class TransferConfig:
    mode: str = "in_mouth"             # outside_mouth | in_mouth
    outside_distance: float = 0.05     # m, user-set hand-off offset
    approach_speed: float = 0.08       # m/s tip speed toward the mouth
    bite_force_threshold: float = 1.0  # N on the tines
    spasm_speed_threshold: float = 0.15  # m/s, deliberately low (prefer false positives)
    in_mouth_inset: float = 0.01       # m past the lips for in-mouth hand-off

    def __post_init__(self):
        if self.mode not in ("outside_mouth", "in_mouth"):
            raise ValueError(f"unknown transfer mode {self.mode!r}")
        if self.outside_distance < 0:
            raise ValueError("outside_distance must be >= 0")
        if self.bite_force_threshold <= 0 or self.spasm_speed_threshold <= 0:
            raise ValueError("thresholds must be positive")


# -- perception ------------------------------------------------------------------

def fuse_mouth_estimates(obs: list) -> Optional[MouthEstimate]:
    """Confidence-weighted blend of the visible camera estimates; None when
    every camera is occluded (absence is a value, not an error)."""
    visible = [o for o in obs if not o.occluded and o.mouth_pose_estimate is not None]
    if not visible:
        return None
    weights = np.array([o.confidence for o in visible])
    weights = weights / weights.sum()
    position = np.zeros(3)
    quat = np.zeros(4)
    ref = visible[0].mouth_pose_estimate.orientation
    for w, o in zip(weights, visible):
        position += w * o.mouth_pose_estimate.position
        q = o.mouth_pose_estimate.orientation
        if np.dot(q, ref) < 0:
            q = -q
        quat += w * q
    return MouthEstimate(
        pose=Pose(position, quat_normalize(quat)),
        confidence=float(np.dot(weights, [o.confidence for o in visible])),
        timestamp=visible[0].timestamp,
        sources=frozenset(o.camera_id for o in visible),
    )


def filter_outliers(est: MouthEstimate, likely: LikelyRange,
                    prev: Optional[MouthEstimate]) -> Optional[str]:
    """None to accept, otherwise the rejection reason."""
    if not likely.contains(est.pose.position):
        return OUT_OF_RANGE
    if prev is not None and est.timestamp > prev.timestamp:
        dt = est.timestamp - prev.timestamp
        speed = float(np.linalg.norm(est.pose.position - prev.pose.position)) / dt
        if speed > likely.max_speed:
            return IMPLAUSIBLE_JUMP
    return None


def detect_spasm(history: list, threshold: float = 0.15,
                 baseline: float = SPASM_BASELINE_S,
                 smooth: float = SPASM_SMOOTH_S) -> bool:
    """True when any smoothed finite-difference speed over the window exceeds
    the threshold. Differences are taken over a >= baseline lag when available
    (adjacent samples otherwise) so camera noise cannot dominate the estimate.
    """
    if len(history) < 2:
        raise InsufficientHistory("need at least 2 samples")
    times = np.array([t for t, _ in history])
    pos = np.array([p for _, p in history])
    smoothed = np.empty_like(pos)
    for i in range(len(times)):
        mask = (times >= times[i] - smooth) & (times <= times[i])
        smoothed[i] = pos[mask].mean(axis=0)
    span = times[-1] - times[0]
    max_speed = 0.0
    for i in range(1, len(times)):
        lagged = np.nonzero(times <= times[i] - baseline)[0]
        if len(lagged):
            j = int(lagged[-1])
        elif span < baseline:
            j = 0   # whole history shorter than the lag: use what exists
        else:
            continue  # short-lag pairs are noise-dominated, skip them
        dt = times[i] - times[j]
        if dt <= 0:
            continue
        speed = float(np.linalg.norm(smoothed[i] - smoothed[j])) / dt
        max_speed = max(max_speed, speed)
    return bool(max_speed > threshold)


def check_readiness(mouth_open: bool, talking: bool, estimate_age: float,
                    absence_window: float = ABSENCE_WINDOW_S) -> ReadinessState:
    """Pause triggers, in priority order: perception loss, talking, closed mouth."""
    if estimate_age > absence_window:
        return ReadinessState(False, "no_estimate")
    if talking:
        return ReadinessState(False, "talking")
    if not mouth_open:
        return ReadinessState(False, "mouth_closed")
    return ReadinessState(True)


class TransferPerception:
    """Per-episode fusion/filter/history state feeding the policy."""

    def __init__(self, likely: LikelyRange, spasm_threshold: float = 0.15,
                 history_s: float = 0.4):
        self.likely = likely
        self.spasm_threshold = spasm_threshold
        self.history_s = history_s
        self.history = []              # (t, position) of accepted estimates
        self.last_accepted: Optional[MouthEstimate] = None
        self.last_valid_time = float("-inf")
        self.rejections = []

    def ingest(self, observations: list, now: float) -> Optional[MouthEstimate]:
        fused = fuse_mouth_estimates(observations)
        if fused is None:
            return None
        reason = filter_outliers(fused, self.likely, self.last_accepted)
        if reason is not None:
            self.rejections.append((now, reason))
            return None
        assert self.likely.contains(fused.pose.position)
        self.last_accepted = fused
        self.last_valid_time = now
        self.history.append((now, fused.pose.position.copy()))
        cutoff = now - self.history_s
        while self.history and self.history[0][0] < cutoff:
            self.history.pop(0)
        return fused

    def estimate_age(self, now: float) -> float:
        return now - self.last_valid_time

    def spasm_fired(self) -> bool:
        if len(self.history) < 2:
            return False
        return detect_spasm(self.history, self.spasm_threshold)

    def motion_window(self, now: float, duration: float = CLASSIFY_WINDOW_S) -> list:
        return [(t, p) for t, p in self.history if t >= now - duration]


# -- interaction classification -----------------------------------------------------

def _sustained_run(times: np.ndarray, mask: np.ndarray, min_duration: float):
    """(start_idx, end_idx) of the first True run lasting >= min_duration."""
    start = None
    for i, flag in enumerate(mask):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            if times[i - 1] - times[start] >= min_duration - 1e-9:
                return start, i - 1
            start = None
    if start is not None and times[-1] - times[start] >= min_duration - 1e-9:
        return start, len(mask) - 1
    return None


def classify_interaction(ft_window: list, motion_window: list, phase: TransferPhase,
                         cfg: TransferConfig) -> InteractionClass:
    """Rule-based decision over a 0.2 s window. Rule order: no-contact, bite,
    spasm, in-mouth manipulation, incidental."""
    if len(ft_window) < 2:
        raise WindowTooShort("need at least 2 readings")
    times = np.array([r.timestamp for r in ft_window])
    if times[-1] - times[0] < CLASSIFY_WINDOW_S - 0.015:
        raise WindowTooShort(f"window spans {times[-1] - times[0]:.3f} s")

    norms = np.array([r.force_norm() for r in ft_window])
    if np.all(norms < NO_CONTACT_EPS):
        return InteractionClass.NO_CONTACT

    in_handoff = phase in (TransferPhase.IN_MOUTH, TransferPhase.OUTSIDE_HOLD)
    tine_press = np.array([max(0.0, -r.force[2]) for r in ft_window])
    if in_handoff:
        run = _sustained_run(times, tine_press > cfg.bite_force_threshold, BITE_SUSTAIN_S)
        if run is not None and norms[-1] < NO_CONTACT_EPS:
            return InteractionClass.INTENTIONAL_BITE

    if len(motion_window) >= 2 and detect_spasm(motion_window, cfg.spasm_speed_threshold):
        return InteractionClass.INVOLUNTARY

    if phase == TransferPhase.IN_MOUTH:
        lateral = np.array([float(np.hypot(r.force[0], r.force[1])) for r in ft_window])
        if _sustained_run(times, lateral > MANIPULATION_FORCE, BITE_SUSTAIN_S) is not None:
            return InteractionClass.IN_MOUTH_MANIPULATION

    return InteractionClass.INCIDENTAL


# -- phase policy ---------------------------------------------------------------------

@dataclass
class CommandIntent:
    """What the policy wants this tick; the runtime maps it onto controllers."""
    kind: str                              # hold | comply | servo | done
    target_position: Optional[np.ndarray] = None
    align_direction: Optional[np.ndarray] = None
    speed: float = 0.0


@dataclass
class PolicyInput:
    now: float
    tip_position: np.ndarray
    guard_run: bool
    readiness: ReadinessState
    fused: Optional[MouthEstimate]         # latest accepted estimate
    mouth_normal: np.ndarray
    spasm: bool
    interaction: Optional[InteractionClass] = None


class TransferPolicy:
    """Staging -> readiness gate -> retargeting approach -> hand-off -> retract.
    Every tick re-reads the fused mouth estimate; involuntary motion or a
    watchdog shutdown always wins over progress."""

    def __init__(self, cfg: TransferConfig, staging_position: np.ndarray):
        self.cfg = cfg
        self.staging_position = np.asarray(staging_position, dtype=float)
        self.phase = TransferPhase.APPROACH_STAGING
        self.breadcrumbs = []
        self.quiet_since: Optional[float] = float("-inf")  # None while a spasm is live
        self.events = []

    def _note(self, now, what):
        self.events.append((now, what))

    def handoff_target(self, fused: MouthEstimate, mouth_normal: np.ndarray) -> np.ndarray:
        mouth = fused.pose.position
        if self.cfg.mode == "outside_mouth":
            return mouth + self.cfg.outside_distance * mouth_normal
        return mouth - self.cfg.in_mouth_inset * mouth_normal  # past the lips

    def _update_spasm_clock(self, inp: PolicyInput):
        if inp.spasm or inp.interaction == InteractionClass.INVOLUNTARY:
            self.quiet_since = None
        elif self.quiet_since is None:
            self.quiet_since = inp.now

    def _spasm_hold(self, inp: PolicyInput) -> bool:
        return self.quiet_since is None or inp.now - self.quiet_since < STILLNESS_S

    def step(self, inp: PolicyInput) -> CommandIntent:
        if self.phase in (TransferPhase.DONE, TransferPhase.ABORTED):
            return CommandIntent("done")
        if not inp.guard_run:
            self.phase = TransferPhase.ABORTED
            self._note(inp.now, "watchdog_shutdown")
            return CommandIntent("hold")
        self._update_spasm_clock(inp)

        if self.phase == TransferPhase.APPROACH_STAGING:
            if np.linalg.norm(inp.tip_position - self.staging_position) < ARRIVE_TOL:
                self.phase = TransferPhase.WAIT_READY
                return CommandIntent("hold")
            return CommandIntent("servo", self.staging_position, -inp.mouth_normal,
                                 self.cfg.approach_speed)

        if self.phase == TransferPhase.WAIT_READY:
            if inp.readiness.ready:
                self.phase = TransferPhase.APPROACH_MOUTH
                self._note(inp.now, "approach_start")
            return CommandIntent("hold")

        if self.phase == TransferPhase.APPROACH_MOUTH:
            if self._spasm_hold(inp):
                self._note(inp.now, "spasm_hold")
                return CommandIntent("comply")
            if inp.fused is not None:
                self._last_target = self.handoff_target(inp.fused, inp.mouth_normal)
            target = getattr(self, "_last_target", None)
            dist = (float(np.linalg.norm(inp.tip_position - target))
                    if target is not None else float("inf"))
            committed = dist < COMMIT_RANGE
            if not inp.readiness.ready and not (
                    committed and inp.readiness.reason == "no_estimate"):
                self._note(inp.now, f"pause_{inp.readiness.reason}")
                return CommandIntent("hold")
            if target is None:
                return CommandIntent("hold")
            if dist < HANDOFF_TOL:
                self.phase = (TransferPhase.OUTSIDE_HOLD if self.cfg.mode == "outside_mouth"
                              else TransferPhase.IN_MOUTH)
                self._note(inp.now, f"handoff_{self.phase.value}")
                return CommandIntent("hold" if self.cfg.mode == "outside_mouth" else "comply")
            self.breadcrumbs.append(inp.tip_position.copy())
            return CommandIntent("servo", target, -inp.mouth_normal, self.cfg.approach_speed)

        if self.phase == TransferPhase.OUTSIDE_HOLD:
            if inp.interaction == InteractionClass.INTENTIONAL_BITE:
                self.phase = TransferPhase.RETRACT
                self._note(inp.now, "bite_detected")
            return CommandIntent("hold")

        if self.phase == TransferPhase.IN_MOUTH:
            if inp.interaction == InteractionClass.INTENTIONAL_BITE:
                self.phase = TransferPhase.RETRACT
                self._note(inp.now, "bite_detected")
                return CommandIntent("comply")
            if self._spasm_hold(inp) or inp.interaction in (
                    InteractionClass.INVOLUNTARY, InteractionClass.IN_MOUTH_MANIPULATION):
                return CommandIntent("comply")
            return CommandIntent("comply")

        if self.phase == TransferPhase.RETRACT:
            if self._spasm_hold(inp):
                self._note(inp.now, "spasm_hold")
                return CommandIntent("hold")
            while self.breadcrumbs and np.linalg.norm(
                    inp.tip_position - self.breadcrumbs[-1]) < ARRIVE_TOL:
                self.breadcrumbs.pop()
            if not self.breadcrumbs:
                self.phase = TransferPhase.DONE
                self._note(inp.now, "retract_complete")
                return CommandIntent("done")
            return CommandIntent("servo", self.breadcrumbs[-1], -inp.mouth_normal,
                                 self.cfg.approach_speed)

        raise AssertionError(f"unhandled phase {self.phase}")
