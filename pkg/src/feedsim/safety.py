"""Watchdog safety kernel: centralized invariant checks, periodic all-clear
heartbeat, receiver-side deadman guard, and the latched e-stop.

Consumers never reason about individual invariants; they only watch for the
heartbeat and shut down when it lapses. Guards start in SHUTDOWN until the
first all-clear arrives (fail-safe startup).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from .sensors import SensorHealth

FORCE_SENSOR_STALE = "FORCE_SENSOR_STALE"
ESTOP_ENGAGED = "ESTOP_ENGAGED"
CHECKED_INVARIANTS = (FORCE_SENSOR_STALE, ESTOP_ENGAGED)

RUN = "run"
SHUTDOWN = "shutdown"


@dataclass
class WatchdogConfig:
    heartbeat_period: float = 0.1
    staleness_limit: float = 0.5
    receiver_timeout: float = 0.3

    def __post_init__(self):
        if min(self.heartbeat_period, self.staleness_limit, self.receiver_timeout) <= 0:
            raise ValueError("watchdog timing values must be positive")
        if self.receiver_timeout < 2.0 * self.heartbeat_period:
            raise ValueError("receiver_timeout must be >= 2 * heartbeat_period")


@dataclass
class AllClearMessage:
    seq: int
    timestamp: float
    checked_invariants: tuple = CHECKED_INVARIANTS


@dataclass
class EStopState:
    engaged: bool = False
    source: Optional[str] = None       # button | operator_switch | software
    engage_time: Optional[float] = None


def engage_estop(estop: EStopState, source: str, t: float) -> EStopState:
    """Latch the e-stop. Idempotent: a second engage keeps the first record."""
    if not estop.engaged:
        estop.engaged = True
        estop.source = source
        estop.engage_time = t
    return estop


def reset_estop(estop: EStopState, robot_idle: bool) -> bool:
    """Clear the latch; allowed only while the robot is idle."""
    if not robot_idle:
        return False
    estop.engaged = False
    estop.source = None
    estop.engage_time = None
    return True


def check_invariants(health: SensorHealth, estop: EStopState, now: float,
                     cfg: WatchdogConfig) -> list:
    """Violation ids, empty when everything passes."""
    violations = []
    if (not health.connected) or (now - health.last_reading_time > cfg.staleness_limit):
        violations.append(FORCE_SENSOR_STALE)
    if estop.engaged:
        violations.append(ESTOP_ENGAGED)
    return violations


class ViolationLog:
    """JSON-lines audit trail of watchdog violations and safety events."""

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self.events = []

    def record(self, t: float, kind: str, detail):
        event = {"t": t, "kind": kind, "detail": detail}
        self.events.append(event)
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(event) + "\n")


class Watchdog:
    """Single checker node: emits an all-clear only when every invariant passes
    and a full heartbeat period has elapsed since the previous emission."""

    def __init__(self, cfg: Optional[WatchdogConfig] = None,
                 log: Optional[ViolationLog] = None):
        self.cfg = cfg or WatchdogConfig()
        self.log = log or ViolationLog()
        self.seq = 0
        self.last_emit: Optional[float] = None
        self.last_violations: list = []

    def tick(self, health: SensorHealth, estop: EStopState, now: float) -> Optional[AllClearMessage]:
        violations = check_invariants(health, estop, now, self.cfg)
        if violations != self.last_violations:
            if violations:
                self.log.record(now, "violation", violations)
            self.last_violations = violations
        if violations:
            return None
        if self.last_emit is not None and now - self.last_emit < self.cfg.heartbeat_period - 1e-12:
            return None
        self.seq += 1
        self.last_emit = now
        return AllClearMessage(seq=self.seq, timestamp=now)


class HeartbeatReceiver:
    """Deadman guard for one consumer. Starts in SHUTDOWN; seq regressions are
    treated as violations and the offending message is discarded."""

    def __init__(self, cfg: Optional[WatchdogConfig] = None,
                 log: Optional[ViolationLog] = None):
        self.cfg = cfg or WatchdogConfig()
        self.log = log or ViolationLog()
        self.last_allclear = float("-inf")
        self.last_seq = 0

    def observe(self, msg: AllClearMessage):
        if msg.seq <= self.last_seq:
            self.log.record(msg.timestamp, "seq_regression",
                            {"got": msg.seq, "last": self.last_seq})
            return
        self.last_seq = msg.seq
        self.last_allclear = msg.timestamp

    def state(self, now: float) -> str:
        if now - self.last_allclear > self.cfg.receiver_timeout:
            return SHUTDOWN
        return RUN


def receiver_guard(last_allclear: float, now: float, cfg: WatchdogConfig) -> str:
    """Stateless guard decision from the last received all-clear timestamp."""
    return SHUTDOWN if now - last_allclear > cfg.receiver_timeout else RUN
