"""The control-loop owner: one FeedingRuntime steps the world at 100 Hz,
wires sensors through the watchdog to the controller manager, executes one
behavior tree at a time, and records everything a report needs.

Robot-affecting requests serialize through runtime methods guarded by one
lock; the e-stop sets a flag observed at the top of every tick and latches
before the acknowledgement returns.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, replace, field
from typing import Optional

import numpy as np

from . import acquire as acq
from .bt import NodeStatus, TreeExecution
from .control import (
    CompliantController,
    ControllerKind,
    ControllerManagerState,
    GateConfig,
    GatedVelocityController,
    TrajectoryTracker,
    lock_manager,
    plan_joint_path,
    retime_trajectory,
    switch_controller,
    unlock_manager,
)
from .geometry import Pose, quat_rotate
from .safety import (
    RUN,
    EStopState,
    HeartbeatReceiver,
    ViolationLog,
    Watchdog,
    WatchdogConfig,
    engage_estop,
    reset_estop,
)
from .scenario import KNOWN_FOOD_CLASSES, build_world
from .sensors import CameraRig, Disconnected, FTSensor, observe_mouth
from .transfer import (
    CLASSIFY_WINDOW_S,
    InteractionClass,
    LikelyRange,
    MouthEstimate,
    PolicyInput,
    TransferConfig,
    TransferPerception,
    TransferPhase,
    TransferPolicy,
    WindowTooShort,
    check_readiness,
    classify_interaction,
)
from .trees import APP_STATE_TREES, TREE_BUILDERS
from .world import CONTROL_DT, MOUTH_OFFSET, forward_kinematics, ik_solve, jacobian, step_world


class Busy(RuntimeError):
    pass


class SafetyLockout(RuntimeError):
    pass


class UnknownId(KeyError):
    pass


class AlreadyTerminal(RuntimeError):
    pass


class ValidationFailed(ValueError):
    def __init__(self, field_name, message):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass(frozen=True)
class ParamSet:
    speed_scale: float = 1.0
    transfer_mode: str = "in_mouth"
    outside_distance: float = 0.05
    gate_f_max: float = 4.0
    gate_tau_max: float = 4.0
    interface_mode: str = "buttons"
    revision: int = 0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("speed_scale", "transfer_mode", "outside_distance", "gate_f_max",
                 "gate_tau_max", "interface_mode", "revision")}


def validate_params(patch: dict):
    if "speed_scale" in patch and not 0.0 < float(patch["speed_scale"]) <= 1.0:
        raise ValidationFailed("speed_scale", "must be in (0, 1]")
    if "transfer_mode" in patch and patch["transfer_mode"] not in ("in_mouth", "outside_mouth"):
        raise ValidationFailed("transfer_mode", "must be in_mouth or outside_mouth")
    if "outside_distance" in patch and not 0.0 <= float(patch["outside_distance"]) <= 0.3:
        raise ValidationFailed("outside_distance", "must be in [0, 0.3]")
    for key in ("gate_f_max", "gate_tau_max"):
        if key in patch and not 0.0 < float(patch[key]) <= 100.0:
            raise ValidationFailed(key, "must be in (0, 100]")
    if "interface_mode" in patch and patch["interface_mode"] not in ("buttons", "large_target", "switch_scan"):
        raise ValidationFailed("interface_mode", "unknown interface mode")


class ParamStore:
    """Atomic snapshot semantics: readers grab one immutable ParamSet."""

    def __init__(self, initial: Optional[ParamSet] = None):
        self._current = initial or ParamSet()
        self._lock = threading.Lock()

    def get(self) -> ParamSet:
        return self._current

    def patch(self, changes: dict) -> ParamSet:
        validate_params(changes)
        with self._lock:
            fields = {k: v for k, v in changes.items() if k != "revision"}
            self._current = replace(self._current, revision=self._current.revision + 1, **fields)
            return self._current


@dataclass
class ActionRecord:
    id: str
    tree: str
    args: dict
    state: str = "accepted"          # accepted|running|succeeded|failed|preempted
    reason: Optional[str] = None
    t_start: Optional[float] = None
    t_end: Optional[float] = None
    node_path: list = field(default_factory=list)

    def terminal(self) -> bool:
        return self.state in ("succeeded", "failed", "preempted")

    def to_dict(self) -> dict:
        return {"id": self.id, "tree": self.tree, "args": self.args, "state": self.state,
                "reason": self.reason, "t_start": self.t_start, "t_end": self.t_end,
                "node_path": list(self.node_path)}


class FeedingRuntime:
    """Owns the world, the safety stack, and the single active tree."""

    def __init__(self, scenario: dict, violation_log_path: Optional[str] = None,
                 library: Optional[acq.ActionLibrary] = None,
                 bandit: Optional[acq.BanditState] = None,
                 watchdog_cfg: Optional[WatchdogConfig] = None):
        self.scenario = scenario
        self.world = build_world(scenario)
        self.dt = CONTROL_DT
        self.lock = threading.RLock()

        self.ft_sensor = FTSensor()
        self.camera_rig = CameraRig(
            pos_noise_std=float(scenario.get("camera_noise_std", 0.003)))
        self.violation_log = ViolationLog(violation_log_path)
        self.watchdog_cfg = watchdog_cfg or WatchdogConfig()
        self.watchdog = Watchdog(self.watchdog_cfg, self.violation_log)
        self.receiver = HeartbeatReceiver(self.watchdog_cfg, self.violation_log)
        self.estop = EStopState()
        self._estop_flag = threading.Event()
        self.watchdog_alive = True

        self.manager = ControllerManagerState()
        self.gated = GatedVelocityController(GateConfig())
        self.compliant = CompliantController()
        self.tracker: Optional[TrajectoryTracker] = None

        self.params = ParamStore()
        self.library = library or acq.k_medoids(acq.generate_expert_dataset(500, seed=7),
                                                k=11, seed=7)
        visual_dim = len(acq.VisualContext.build(
            KNOWN_FOOD_CLASSES, "grape", np.array([0.02] * 3), 100.0).vector)
        self.bandit = bandit or acq.BanditState(len(self.library), visual_dim, alpha=0.5)
        self.haptic_moments = acq.RunningMoments()

        self.perception = TransferPerception(self._likely_range_from_scenario())
        self.transfer_policy: Optional[TransferPolicy] = None
        self.last_interaction: Optional[InteractionClass] = None
        self.interaction_timeline = []
        self.ft_window = []

        self.last_reading = None
        self.pending_velocity: Optional[np.ndarray] = None
        self.events = []
        self.bandit_trace = []
        self.telemetry_frames = []
        self.telemetry_listeners = []
        self.telemetry_divisor = 10
        self.camera_divisor = 3       # ~33 Hz camera rate against the 100 Hz loop
        self.csv_rows = []

        self.actions: dict = {}
        self.active: Optional[ActionRecord] = None
        self.execution: Optional[TreeExecution] = None
        self._action_ids = itertools.count(1)
        self._estop_latency_ms: Optional[float] = None
        self._estop_wall_time: Optional[float] = None

        self.named_configs = self._solve_named_configs()
        start = scenario.get("initial_config", "stow")
        self.world.set_joint_angles(self.named_configs[start])
        self.trees = {name: builder for name, builder in TREE_BUILDERS.items()}

    # -- setup -----------------------------------------------------------------

    def _likely_range_from_scenario(self) -> LikelyRange:
        head = self.world.head
        mouth = head.base_pose.compose(Pose(position=MOUTH_OFFSET)).position
        amp = np.abs(head.voluntary_amplitudes).sum(axis=0) if len(head.voluntary_amplitudes) else np.zeros(3)
        spasm = (np.max(np.abs([d for _, d, _ in head.spasm_schedule]), axis=0)
                 if head.spasm_schedule else np.zeros(3))
        margin = 0.08 + 4.0 * head.noise_std
        return LikelyRange(mouth, amp + spasm + margin, max_speed=1.0)

    def _solve_named_configs(self) -> dict:
        arm = self.world.arm_model
        down = np.array([0.0, 0.0, -1.0])
        seed = np.array([0.0, 0.7, 1.4, 0.0, 1.0, 0.0])
        mouth = self.world.head.base_pose.compose(Pose(position=MOUTH_OFFSET)).position
        normal = quat_rotate(self.world.head.base_pose.orientation, np.array([1.0, 0.0, 0.0]))
        above = self.world.plate_center + np.array([0.0, 0.0, 0.22])
        staging = mouth + 0.15 * normal + np.array([0.0, 0.0, 0.04])
        stow = np.array([0.12, -0.32, 0.45])
        configs = {}
        configs["above_plate"] = ik_solve(arm, Pose(position=above), seed,
                                          orientation=False, align_axis=down)
        configs["staging"] = ik_solve(arm, Pose(position=staging), seed,
                                      orientation=False, align_axis=-normal)
        configs["stow"] = ik_solve(arm, Pose(position=stow), seed,
                                   orientation=False, align_axis=np.array([0.0, -1.0, 0.0]))
        return configs

    def named_config(self, name: str) -> np.ndarray:
        return self.named_configs[name].copy()

    # -- binding surface ---------------------------------------------------------

    def now(self) -> float:
        return self.world.time

    def guard_run(self) -> bool:
        return (not self.manager.locked
                and self.receiver.state(self.world.time) == RUN
                and not self.watchdog.last_violations)

    def gate_config(self, override=None) -> GateConfig:
        if override is not None:
            return GateConfig(*override)
        p = self.params.get()
        return GateConfig(p.gate_f_max, p.gate_tau_max)

    def plan_to(self, q_goal: np.ndarray, avoid: bool = True) -> list:
        obstacles = []
        if avoid:
            obstacles = [(self.world.head_pose.position, 0.10),
                         (self.world.plate_center - np.array([0, 0, 0.06]), 0.10)]
        return plan_joint_path(self.world.arm_model, self.world.arm.angles.copy(),
                               q_goal, obstacles)

    def start_trajectory(self, path: list, gate_override=None) -> TrajectoryTracker:
        arm = self.world.arm_model
        traj = retime_trajectory(path, arm.velocity_limits(), np.full(6, 4.0),
                                 self.params.get().speed_scale)
        self.tracker = TrajectoryTracker(traj, arm.velocity_limits(), self.dt)
        self.activate_gated(gate_override, kind=ControllerKind.TRAJECTORY)
        return self.tracker

    def activate_gated(self, gate_override=None, kind: ControllerKind = ControllerKind.GATED_VELOCITY):
        switch_controller(self.manager, kind)
        self.gated.rearm(self.gate_config(gate_override))

    def activate_compliant(self, target_q: np.ndarray):
        switch_controller(self.manager, ControllerKind.COMPLIANT)
        self.compliant.set_target(target_q)

    def set_compliant_target(self, target_q: np.ndarray):
        self.compliant.set_target(target_q)

    def hold(self):
        if self.manager.locked:
            return
        if self.manager.active == ControllerKind.COMPLIANT:
            self.compliant.set_target(self.world.arm.angles.copy())
        else:
            self.pending_velocity = np.zeros(6)

    def command_velocity(self, v: np.ndarray):
        self.pending_velocity = np.asarray(v, dtype=float).reshape(6)

    def gate_tripped(self) -> Optional[str]:
        return self.gated.tripped

    def cartesian_velocity(self, direction: np.ndarray, speed: float) -> np.ndarray:
        """Joint velocities moving the tip along a world direction."""
        direction = np.asarray(direction, dtype=float)
        direction = direction / np.linalg.norm(direction)
        J = jacobian(self.world.arm_model, self.world.arm.angles, self.world.frames())[:3]
        v = speed * direction
        dq = J.T @ np.linalg.solve(J @ J.T + 0.002 * np.eye(3), v)
        lim = self.world.arm_model.velocity_limits()
        return np.clip(dq, -lim, lim)

    def joint_step_for_cartesian(self, displacement: np.ndarray) -> np.ndarray:
        """Linearized joint displacement producing a small tip displacement."""
        J = jacobian(self.world.arm_model, self.world.arm.angles, self.world.frames())[:3]
        return J.T @ np.linalg.solve(J @ J.T + 0.002 * np.eye(3),
                                     np.asarray(displacement, dtype=float))

    def servo_velocity(self, target_pos: np.ndarray, align_dir: Optional[np.ndarray],
                       speed: float) -> np.ndarray:
        """Resolved-rate command toward a target point, optionally aligning the
        tool z-axis; decelerates near the goal."""
        tip = self.world.tip_pose()
        e = np.asarray(target_pos, dtype=float) - tip.position
        dist = float(np.linalg.norm(e))
        if dist < 1e-9:
            v_lin = np.zeros(3)
        else:
            v_lin = e / dist * min(speed, 4.0 * dist)
        if align_dir is not None:
            z_now = quat_rotate(tip.orientation, np.array([0.0, 0.0, 1.0]))
            a = np.asarray(align_dir, dtype=float)
            a = a / np.linalg.norm(a)
            w = np.clip(2.0 * np.cross(z_now, a), -1.2, 1.2)
            J = jacobian(self.world.arm_model, self.world.arm.angles, self.world.frames())
            err = np.concatenate([v_lin, w])
            dq = J.T @ np.linalg.solve(J @ J.T + 0.002 * np.eye(6), err)
        else:
            J = jacobian(self.world.arm_model, self.world.arm.angles, self.world.frames())[:3]
            dq = J.T @ np.linalg.solve(J @ J.T + 0.002 * np.eye(3), v_lin)
        lim = self.world.arm_model.velocity_limits()
        return np.clip(dq, -lim, lim)

    def ik_to_approach(self, approach: Pose) -> np.ndarray:
        """Joint target placing the fork tip at the approach pose, tines along
        the approach frame's descent direction."""
        descend = quat_rotate(approach.orientation, np.array([0.0, 0.0, -1.0]))
        return ik_solve(self.world.arm_model, Pose(position=approach.position),
                        self.world.arm.angles.copy(), orientation=False,
                        align_axis=descend)

    # -- acquisition flow -----------------------------------------------------------

    def visual_context(self, item) -> acq.VisualContext:
        return acq.VisualContext.build(KNOWN_FOOD_CLASSES, item.food_class,
                                       item.size, item.resistance)

    def finish_acquisition(self, food_id: str, arm_index: int, reward: int,
                           series: list, execution: TreeExecution):
        visual = execution.blackboard["visual_context"]
        if series:
            haptic = acq.compute_posthoc_context(series, self.haptic_moments)
        else:
            haptic = acq.HapticContext(np.zeros(acq.HAPTIC_DIM), np.zeros(acq.HAPTIC_DIM))
        acq.update_bandit(self.bandit, arm_index, visual, haptic, reward)
        entry = {"t": self.now(), "food": food_id, "arm": arm_index, "reward": reward}
        self.bandit_trace.append(entry)
        self.log_event("acquisition_attempt", entry)

    # -- transfer flow ----------------------------------------------------------------

    def begin_transfer_episode(self):
        p = self.params.get()
        cfg = TransferConfig(mode=p.transfer_mode, outside_distance=p.outside_distance)
        self.transfer_policy = TransferPolicy(cfg, self.world.tip_pose().position.copy())
        self.interaction_timeline = []

    def policy_input(self) -> PolicyInput:
        now = self.now()
        fused = self.perception.last_accepted
        age = self.perception.estimate_age(now)
        readiness = check_readiness(self.world.head.mouth_open_at(now),
                                    self.world.head.talking_at(now), age)
        if fused is not None:
            # short boxcar over accepted estimates steadies the servo target
            recent = [p for t, p in self.perception.history if t >= now - 0.15]
            if recent:
                fused = MouthEstimate(Pose(np.mean(recent, axis=0),
                                           fused.pose.orientation.copy()),
                                      fused.confidence, fused.timestamp, fused.sources)
            normal = quat_rotate(fused.pose.orientation, np.array([1.0, 0.0, 0.0]))
        else:
            normal = self.world.mouth_normal()
        spasm = self.perception.spasm_fired()
        return PolicyInput(now=now, tip_position=self.world.tip_pose().position.copy(),
                           guard_run=self.guard_run(), readiness=readiness, fused=fused,
                           mouth_normal=normal, spasm=spasm,
                           interaction=self.last_interaction)

    def apply_intent(self, intent):
        if intent.kind == "servo":
            if self.manager.active not in (ControllerKind.GATED_VELOCITY,):
                self.activate_gated()
            self.command_velocity(self.servo_velocity(
                intent.target_position, intent.align_direction,
                intent.speed * self.params.get().speed_scale))
        elif intent.kind == "comply":
            if self.manager.active != ControllerKind.COMPLIANT:
                self.activate_compliant(self.world.arm.angles.copy())
        elif intent.kind in ("hold", "done"):
            self.hold()
        else:
            raise AssertionError(f"unknown intent {intent.kind}")

    def _classify_tick(self):
        if self.transfer_policy is None:
            self.last_interaction = None
            return
        now = self.now()
        window = [r for r in self.ft_window if r.timestamp >= now - CLASSIFY_WINDOW_S - 1e-9]
        motion = self.perception.motion_window(now)
        try:
            cls = classify_interaction(window, motion, self.transfer_policy.phase,
                                       self.transfer_policy.cfg)
        except WindowTooShort:
            cls = None
        if cls != self.last_interaction:
            self.interaction_timeline.append({"t": now, "class": cls.value if cls else None})
            self.last_interaction = cls

    # -- safety -----------------------------------------------------------------------

    def trigger_estop(self, source: str = "software"):
        """Infallible; latches before returning."""
        import time as _time
        self._estop_wall_time = _time.monotonic()
        engage_estop(self.estop, source, self.world.time)
        self._estop_flag.set()
        self.log_event("estop", {"source": source})

    def reset_estop_latch(self) -> bool:
        with self.lock:
            idle = self.active is None or self.active.terminal()
            ok = reset_estop(self.estop, robot_idle=idle)
            if ok:
                self._estop_flag.clear()
                self.log_event("estop_reset", {})
            return ok

    def _kill_controllers(self, reason: str):
        if not self.manager.locked:
            lock_manager(self.manager)
            self.log_event("controllers_killed", {"reason": reason})

    def log_event(self, kind: str, detail):
        self.events.append({"t": self.world.time, "kind": kind, "detail": detail})

    # -- the tick -----------------------------------------------------------------------

    def tick(self):
        with self.lock:
            self._tick_locked()

    def _tick_locked(self):
        w = self.world
        now = w.time

        # sensors
        try:
            self.last_reading = self.ft_sensor.read(w)
            self.ft_window.append(self.last_reading)
            cutoff = now - CLASSIFY_WINDOW_S - 0.05
            while self.ft_window and self.ft_window[0].timestamp < cutoff:
                self.ft_window.pop(0)
        except Disconnected:
            self.last_reading = None
        if w.tick % self.camera_divisor == 0:
            obs = [observe_mouth(w, 0, self.camera_rig), observe_mouth(w, 1, self.camera_rig)]
            self.perception.ingest(obs, now)
        self._classify_tick()

        # watchdog heartbeat
        if self.watchdog_alive:
            msg = self.watchdog.tick(self.ft_sensor.health, self.estop, now)
            if msg is not None:
                self.receiver.observe(msg)

        violations = self.watchdog.last_violations if self.watchdog_alive else []
        guard_state = self.receiver.state(now)
        if violations or guard_state != RUN:
            reason = ",".join(violations) if violations else "heartbeat_timeout"
            self._kill_controllers(reason)
            if self._estop_wall_time is not None and self._estop_latency_ms is None:
                import time as _time
                self._estop_latency_ms = (_time.monotonic() - self._estop_wall_time) * 1e3
        elif self.manager.locked and not self.estop.engaged:
            unlock_manager(self.manager)
            self.log_event("controllers_unlocked", {})

        # behavior tree
        self.pending_velocity = None
        if self.execution is not None and not self.execution.terminal():
            status = self.execution.tick(self)
            self.active.node_path = list(self.execution.path)
            self.active.state = "running"
            if status != NodeStatus.RUNNING:
                self.active.state = ("succeeded" if status == NodeStatus.SUCCESS
                                     else ("preempted" if self.execution.failure_reason == "preempted"
                                           else "failed"))
                self.active.reason = self.execution.failure_reason
                self.active.t_end = now
                self.log_event("action_end", {"id": self.active.id, "tree": self.active.tree,
                                              "state": self.active.state,
                                              "reason": self.active.reason})

        # command selection: exactly one controller reaches the world
        mode = "velocity"
        if self.manager.locked:
            cmd = np.zeros(6)
        elif self.manager.zero_pending:
            self.manager.zero_pending = False
            cmd = np.zeros(6)
        elif self.manager.active in (ControllerKind.TRAJECTORY, ControllerKind.GATED_VELOCITY):
            desired = self.pending_velocity if self.pending_velocity is not None else np.zeros(6)
            cmd, trip = self.gated.tick(desired, self.last_reading, now)
            if trip and not getattr(self, "_gate_trip_logged", False):
                self.log_event("gate_trip", {"reason": trip})
                self._gate_trip_logged = True
        elif self.manager.active == ControllerKind.COMPLIANT:
            cmd = self.compliant.tick(w.arm.angles, w.arm.velocities)
            mode = "torque"
        else:
            cmd = np.zeros(6)
        if self.gated.tripped is None:
            self._gate_trip_logged = False

        was_intact = w.utensil.intact
        step_world(w, cmd, self.dt, mode)
        if was_intact and not w.utensil.intact:
            self.log_event("utensil_break", {"t_break": w.utensil.break_time})
        if w.bite_events and (not hasattr(self, "_seen_bites") or len(w.bite_events) > self._seen_bites):
            self._seen_bites = len(w.bite_events)
            self.log_event("bite", {"count": self._seen_bites})

        if w.tick % self.telemetry_divisor == 0:
            frame = self.telemetry_frame()
            self.telemetry_frames.append(frame)
            self.csv_rows.append(self._csv_row(frame))
            for listener in list(self.telemetry_listeners):
                try:
                    listener(frame)
                except Exception:
                    self.telemetry_listeners.remove(listener)

    def run_ticks(self, n: int):
        for _ in range(n):
            self.tick()

    def warm_up(self, max_s: float = 1.0) -> bool:
        """Tick until the first all-clear lifts the startup shutdown."""
        return self.run_until(self.guard_run, max_s=max_s)

    def run_until(self, predicate, max_s: float = 60.0) -> bool:
        deadline = self.world.time + max_s
        while self.world.time < deadline:
            self.tick()
            if predicate():
                return True
        return False

    # -- action lifecycle ------------------------------------------------------------------

    def start_action(self, tree_name: str, args: Optional[dict] = None) -> ActionRecord:
        args = dict(args or {})
        with self.lock:
            if tree_name not in self.trees:
                raise ValidationFailed("tree", f"unknown tree {tree_name!r}")
            if self.active is not None and not self.active.terminal():
                raise Busy(f"action {self.active.id} still {self.active.state}")
            if self.estop.engaged or not self.guard_run():
                raise SafetyLockout("watchdog shutdown or e-stop latched")

            blackboard = {}
            if tree_name == "acquire_food":
                blackboard = self._prepare_acquisition(args)
            tree = self.trees[tree_name]()
            record = ActionRecord(id=f"a{next(self._action_ids)}", tree=tree_name,
                                  args=args, t_start=self.world.time, state="accepted")
            self.execution = TreeExecution(tree, blackboard)
            self.actions[record.id] = record
            self.active = record
            self.log_event("action_start", {"id": record.id, "tree": tree_name, "args": args})
            return record

    def _prepare_acquisition(self, args: dict) -> dict:
        food_id = args.get("food", "auto")
        if food_id == "auto":
            if not self.world.plate:
                raise ValidationFailed("food", "plate is empty")
            food_id = self.world.plate[0].id
        try:
            item = self.world.food_by_id(food_id)
        except KeyError:
            raise ValidationFailed("food", f"no food {food_id!r} on the plate")
        visual = self.visual_context(item)
        if "action_index" in args and args["action_index"] is not None:
            arm_index = int(args["action_index"])
            if not 0 <= arm_index < len(self.library):
                raise ValidationFailed("action_index",
                                       f"must be in [0, {len(self.library)})")
        else:
            arm_index = acq.select_action(self.bandit, visual)
        args["food"] = food_id
        args["action_index"] = arm_index
        return {"food_id": food_id, "arm_index": arm_index, "visual_context": visual}

    def preempt_action(self, action_id: str) -> ActionRecord:
        with self.lock:
            if action_id not in self.actions:
                raise UnknownId(action_id)
            record = self.actions[action_id]
            if record.terminal():
                raise AlreadyTerminal(record.state)
            self.execution.preempt()
            self.hold()
            return record

    def action_status(self, action_id: str) -> ActionRecord:
        if action_id not in self.actions:
            raise UnknownId(action_id)
        return self.actions[action_id]

    # -- introspection -----------------------------------------------------------------------

    def telemetry_frame(self) -> dict:
        w = self.world
        fused = self.perception.last_accepted
        reading = self.last_reading
        return {
            "t": w.time,
            "q": w.arm.angles.tolist(),
            "v": w.arm.velocities.tolist(),
            "f": reading.force.tolist() if reading else None,
            "tau": reading.torque.tolist() if reading else None,
            "f_norm": reading.force_norm() if reading else None,
            "watchdog": {
                "allclear_age": (w.time - self.receiver.last_allclear
                                 if self.receiver.last_allclear > float("-inf") else None),
                "guard": self.receiver.state(w.time),
                "violations": list(self.watchdog.last_violations),
                "estop": self.estop.engaged,
            },
            "action": {"id": self.active.id, "state": self.active.state,
                       "node_path": list(self.active.node_path)} if self.active else None,
            "mouth_estimate": ({"position": fused.pose.position.tolist(),
                                "confidence": fused.confidence,
                                "sources": sorted(fused.sources)} if fused else None),
            "transfer_phase": self.transfer_policy.phase.value if self.transfer_policy else None,
            "utensil_intact": w.utensil.intact,
            "food_on_fork": w.food_on_fork,
        }

    def _csv_row(self, frame: dict) -> dict:
        mouth = frame["mouth_estimate"]
        tip = self.world.tip_pose().position
        return {
            "t": round(frame["t"], 4),
            **{f"q{i}": round(v, 6) for i, v in enumerate(frame["q"])},
            "v_norm": round(float(np.linalg.norm(frame["v"])), 6),
            "f_norm": round(frame["f_norm"], 4) if frame["f_norm"] is not None else "",
            "guard": frame["watchdog"]["guard"],
            "violations": "|".join(frame["watchdog"]["violations"]),
            "action": frame["action"]["id"] if frame["action"] else "",
            "phase": frame["transfer_phase"] or "",
            "tip_x": round(float(tip[0]), 5),
            "tip_y": round(float(tip[1]), 5),
            "tip_z": round(float(tip[2]), 5),
            "mouth_x": round(mouth["position"][0], 5) if mouth else "",
            "mouth_y": round(mouth["position"][1], 5) if mouth else "",
            "mouth_z": round(mouth["position"][2], 5) if mouth else "",
            "utensil_intact": int(frame["utensil_intact"]),
        }

    def state_summary(self) -> dict:
        return {
            "time": self.world.time,
            "guard": self.receiver.state(self.world.time),
            "estop": {"engaged": self.estop.engaged, "source": self.estop.source,
                      "stop_latency_ms": self._estop_latency_ms},
            "violations": list(self.watchdog.last_violations),
            "arm": {"q": self.world.arm.angles.tolist(),
                    "v": self.world.arm.velocities.tolist()},
            "plate": [f.id for f in self.world.plate],
            "food_on_fork": self.world.food_on_fork,
            "consumed": list(self.world.consumed),
            "utensil_intact": self.world.utensil.intact,
            "active_action": self.active.to_dict() if self.active else None,
            "params": self.params.get().to_dict(),
            "bandit_attempts": self.bandit.attempts,
        }

    # -- fault injection ----------------------------------------------------------------------

    def inject_fault(self, kind: str):
        if kind == "ft_disconnect":
            self.ft_sensor.health.connected = False
        elif kind == "ft_reconnect":
            self.ft_sensor.health.connected = True
        elif kind == "watchdog_kill":
            self.watchdog_alive = False
        elif kind == "estop":
            self.trigger_estop("button")
        else:
            raise ValueError(f"unknown fault {kind!r}")
        self.log_event("fault", {"kind": kind})


class ScriptRunner:
    """Executes a scenario script headlessly: sequential actions with timed
    fault injections firing while the simulation advances."""

    def __init__(self, runtime: FeedingRuntime, script: list, step_budget_s: float = 60.0):
        self.rt = runtime
        self.script = list(script)
        self.step_budget_s = step_budget_s
        self.faults = sorted([(float(s["at"]), s["fault"]) for s in script if "fault" in s])
        self.outcomes = []

    def _fire_due_faults(self):
        while self.faults and self.faults[0][0] <= self.rt.world.time:
            _, kind = self.faults.pop(0)
            self.rt.inject_fault(kind)

    def _tick(self):
        self._fire_due_faults()
        self.rt.tick()

    def _run_action(self, tree: str, args: Optional[dict] = None) -> ActionRecord:
        try:
            record = self.rt.start_action(tree, args)
        except (Busy, SafetyLockout, ValidationFailed) as e:
            synthetic = ActionRecord(id="-", tree=tree, args=args or {},
                                     state="failed", reason=type(e).__name__.lower(),
                                     t_start=self.rt.world.time, t_end=self.rt.world.time)
            return synthetic
        deadline = self.rt.world.time + self.step_budget_s
        while not record.terminal() and self.rt.world.time < deadline:
            self._tick()
        if not record.terminal():
            self.rt.preempt_action(record.id)
            self._tick()
        return record

    def _record(self, step, records):
        records = records if isinstance(records, list) else [records]
        self.outcomes.append({
            "step": step,
            "actions": [r.to_dict() for r in records],
            "ok": all(r.state == "succeeded" for r in records),
        })

    def run(self) -> list:
        self.rt.warm_up()
        for step in self.script:
            if "fault" in step:
                continue   # fired by time, not order
            if "wait" in step:
                end = self.rt.world.time + float(step["wait"])
                while self.rt.world.time < end:
                    self._tick()
                self.outcomes.append({"step": step, "actions": [], "ok": True})
                continue
            action = step["action"]
            if action == "move_above_plate":
                self._record(step, self._run_action("move_above_plate"))
            elif action == "stow":
                self._record(step, self._run_action("stow"))
            elif action == "acquire":
                tries = int(step.get("tries", 3))
                records = []
                for _ in range(tries):
                    args = {"food": step.get("food", "auto")}
                    if "action_index" in step:
                        args["action_index"] = step["action_index"]
                    rec = self._run_action("acquire_food", args)
                    records.append(rec)
                    if rec.state == "succeeded" or rec.reason in (
                            "safety_lockout", "safetylockout", "safety_shutdown"):
                        break
                self.outcomes.append({"step": step,
                                      "actions": [r.to_dict() for r in records],
                                      "ok": records[-1].state == "succeeded"})
            elif action == "transfer":
                consumed_before = len(self.rt.world.consumed)
                records = []
                for tree in ("move_to_staging", "move_to_mouth", "in_mouth_transfer", "retract"):
                    rec = self._run_action(tree)
                    records.append(rec)
                    if rec.state != "succeeded":
                        break
                ok = (all(r.state == "succeeded" for r in records)
                      and len(self.rt.world.consumed) > consumed_before)
                self.outcomes.append({"step": step,
                                      "actions": [r.to_dict() for r in records], "ok": ok})
            elif action == "press":
                self._record(step, self._run_press(step))
            else:
                raise ValueError(f"unknown script action {action!r}")
        return self.outcomes

    def _run_press(self, step) -> ActionRecord:
        """Diagnostic overload: drive the fork into an item with the gate
        overridden so the breakaway layer (not gating) is what reacts."""
        from .bt import Action as BTAction, GateOverride, Sequence, Timeout, TreeDefinition
        from .trees import REGISTRY

        food_id = step["food"]
        item = self.rt.world.food_by_id(food_id)
        arm_index = 0
        tree = TreeDefinition("press", Sequence("press", [
            BTAction("frames", "compute_frames", REGISTRY),
            Timeout("t1", BTAction("approach", "move_to_approach", REGISTRY), 25.0),
            Timeout("t2", GateOverride("g", BTAction("press", "execute_schema", REGISTRY),
                                       step.get("gate_override", 60.0),
                                       step.get("gate_override", 60.0)), 25.0),
        ]))
        blackboard = {"food_id": food_id, "arm_index": arm_index,
                      "visual_context": self.rt.visual_context(item),
                      "depth_override": float(step.get("depth", 0.015))}
        with self.rt.lock:
            if self.rt.active is not None and not self.rt.active.terminal():
                raise Busy("action in flight")
            record = ActionRecord(id=f"a{next(self.rt._action_ids)}", tree="press",
                                  args={"food": food_id}, t_start=self.rt.world.time)
            self.rt.execution = TreeExecution(tree, blackboard)
            self.rt.actions[record.id] = record
            self.rt.active = record
        deadline = self.rt.world.time + self.step_budget_s
        while not record.terminal() and self.rt.world.time < deadline:
            self._tick()
        return record


def run_script(runtime: FeedingRuntime, script: list) -> list:
    return ScriptRunner(runtime, script).run()
