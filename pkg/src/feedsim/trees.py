"""The feeding trees and their action bindings against the runtime context.

Bindings talk to the runtime through a narrow surface (activate_*, command
helpers, event log); every motion binding checks the watchdog guard first so a
shutdown fails the tree at its first gated node.
"""

from __future__ import annotations

import numpy as np

from .bt import Action, Condition, NodeStatus, Sequence, Timeout, TreeDefinition
from .transfer import TransferPhase
from .world import approach_frame, food_frame

S, F, R = NodeStatus.SUCCESS, NodeStatus.FAILURE, NodeStatus.RUNNING

# App FSM state -> tree (or idle); the webapp mirrors this table.
APP_STATE_TREES = {
    "Home": "idle",
    "MovingAbovePlate": "move_above_plate",
    "BiteSelection": "idle",
    "Acquiring": "acquire_food",
    "MovingToStaging": "move_to_staging",
    "AwaitingReady": "idle",
    "MovingToMouth": "move_to_mouth",
    "InMouthTransfer": "in_mouth_transfer",
    "Retracting": "retract",
    "Stowing": "stow",
    "Settings": "idle",
}


class UnknownFood(KeyError):
    pass


def _guard(ctx, execution) -> bool:
    return ctx.guard_run()


class MoveToConfigBinding:
    """Plan, retime, and track a trajectory to a named joint configuration."""

    def start(self, ctx, execution, params):
        self.failed_reason = None
        target_name = params["target"]
        try:
            q_goal = ctx.named_config(target_name)
            path = ctx.plan_to(q_goal, avoid=params.get("avoid", True))
            self.tracker = ctx.start_trajectory(path, execution.blackboard.get("gate_override"))
        except Exception as e:
            self.failed_reason = f"planning: {e}"
            self.tracker = None

    def step(self, ctx, execution):
        if self.failed_reason:
            execution.blackboard["failure_reason"] = self.failed_reason
            return F
        if not ctx.guard_run():
            execution.blackboard["failure_reason"] = "safety_shutdown"
            return F
        trip = ctx.gate_tripped()
        if trip:
            execution.blackboard["failure_reason"] = f"force_gate_{trip}"
            ctx.hold()
            return F
        q = ctx.world.arm.angles
        if self.tracker.done(q):
            ctx.hold()
            return S
        ctx.command_velocity(self.tracker.tick(q))
        return R

    def cancel(self, ctx):
        ctx.hold()


class ComputeFramesBinding:
    """Food and approach reference frames into the blackboard."""

    def start(self, ctx, execution, params):
        pass

    def step(self, ctx, execution):
        food_id = execution.blackboard["food_id"]
        arm_index = execution.blackboard["arm_index"]
        try:
            item = ctx.world.food_by_id(food_id)
        except KeyError:
            execution.blackboard["failure_reason"] = "unknown_food"
            return F
        action = ctx.library.medoids[arm_index]
        frame = food_frame(item)
        approach = approach_frame(
            frame,
            offset=np.array([action["approach_offset_x"], action["approach_offset_y"],
                             action["approach_offset_z"]]),
            pitch=action["approach_pitch"], roll=action["approach_roll"])
        execution.blackboard["food_frame"] = frame
        execution.blackboard["approach_frame"] = approach
        return S

    def cancel(self, ctx):
        pass


class MoveToApproachBinding:
    """Trajectory to the approach pose (tool z pointing down the approach)."""

    def start(self, ctx, execution, params):
        self.failed_reason = None
        approach = execution.blackboard["approach_frame"]
        try:
            q_goal = ctx.ik_to_approach(approach)
            self.tracker = ctx.start_trajectory(
                [ctx.world.arm.angles.copy(), q_goal],
                execution.blackboard.get("gate_override"))
        except Exception as e:
            self.failed_reason = f"ik: {e}"
            self.tracker = None

    step = MoveToConfigBinding.step
    cancel = MoveToConfigBinding.cancel


class ExecuteSchemaBinding:
    """The three acquisition phases: gated descent to first contact, compliant
    in-food manipulation down to depth, then extraction under a raised gate
    (extraction starts in contact by design, so the default free-motion gate
    would trip immediately; the raised gate stays well under the breakaway
    threshold). The attempt outcome is drawn by the world at extraction
    completion; the bandit only learns from completed attempts."""

    EXTRACT_GATE = (8.0, 8.0)
    CONTACT_BITE = 0.004   # m into the surface before compliance takes over

    def start(self, ctx, execution, params):
        self.food_id = execution.blackboard["food_id"]
        self.arm_index = execution.blackboard["arm_index"]
        self.action = ctx.library.medoids[self.arm_index]
        self.depth = execution.blackboard.get("depth_override",
                                              self.action["penetration_depth"])
        self.series = []
        self.phase = "descend"
        try:
            item = ctx.world.food_by_id(self.food_id)
        except KeyError:
            self.phase = "unknown_food"
            return
        ctx.world.begin_acquisition_attempt(self.food_id, self.arm_index)
        surface_z = item.pose.position[2] + item.radius()
        self.contact_target_z = surface_z - self.CONTACT_BITE
        self.depth_target_z = surface_z - max(self.depth, self.CONTACT_BITE)
        ctx.activate_gated(execution.blackboard.get("gate_override"))

    def _fail(self, ctx, execution, reason):
        ctx.world.cancel_acquisition_attempt()
        execution.blackboard["failure_reason"] = reason
        ctx.hold()
        return F

    def step(self, ctx, execution):
        if self.phase == "unknown_food":
            execution.blackboard["failure_reason"] = "unknown_food"
            return F
        if not ctx.guard_run():
            return self._fail(ctx, execution, "safety_shutdown")
        if ctx.last_reading is not None:
            self.series.append(ctx.last_reading)

        tip = ctx.world.tip_pose().position
        if self.phase == "descend":
            trip = ctx.gate_tripped()
            if trip:
                return self._fail(ctx, execution, f"force_gate_{trip}")
            if tip[2] <= self.contact_target_z:
                q_contact = ctx.world.arm.angles.copy()
                self.contact_z = tip[2]
                # compliant target: linearized joint move taking the tip the
                # rest of the way to the commanded depth
                remaining = self.depth - self.CONTACT_BITE
                if remaining > 1e-6:
                    dq = ctx.joint_step_for_cartesian(np.array([0.0, 0.0, -remaining]))
                else:
                    dq = np.zeros(6)
                self.q_depth = q_contact + dq
                self.t_in_food = ctx.now()
                ctx.activate_compliant(self.q_depth)
                self.phase = "in_food"
                return R
            ctx.command_velocity(ctx.cartesian_velocity(
                np.array([0.0, 0.0, -1.0]), self.action["approach_speed"]))
            return R

        if self.phase == "in_food":
            elapsed = ctx.now() - self.t_in_food
            if elapsed >= self.action["in_food_duration"]:
                self.extract_z = self.contact_z + self.action["lift_height"]
                ctx.activate_gated(execution.blackboard.get("gate_override")
                                   or self.EXTRACT_GATE)
                self.phase = "extract"
                return R
            target = self.q_depth.copy()
            target[4] += self.action["wiggle_amplitude"] * np.sin(
                2 * np.pi * self.action["wiggle_frequency"] * elapsed)
            target[5] += min(self.action["twirl_rate"] * elapsed, self.action["twirl_angle"])
            lo, hi = ctx.world.arm_model.limits_lo(), ctx.world.arm_model.limits_hi()
            ctx.set_compliant_target(np.clip(target, lo, hi))
            return R

        if self.phase == "extract":
            trip = ctx.gate_tripped()
            if trip:
                return self._fail(ctx, execution, f"force_gate_{trip}")
            if tip[2] >= self.extract_z:
                acquired = ctx.world.resolve_acquisition()
                ctx.finish_acquisition(self.food_id, self.arm_index,
                                       int(acquired), self.series, execution)
                ctx.hold()
                if acquired:
                    return S
                execution.blackboard["failure_reason"] = "acquisition_failed"
                return F
            ctx.command_velocity(ctx.cartesian_velocity(
                np.array([0.0, 0.0, 1.0]), self.action["lift_speed"]))
            return R

        raise AssertionError(self.phase)

    def cancel(self, ctx):
        ctx.world.cancel_acquisition_attempt()
        ctx.hold()


class TransferStepBinding:
    """Drives the transfer phase policy until one of the milestone phases."""

    def start(self, ctx, execution, params):
        self.until = {TransferPhase(p) for p in params["until"]}
        self.fresh = params.get("fresh", False)
        if self.fresh or ctx.transfer_policy is None:
            ctx.begin_transfer_episode()

    def step(self, ctx, execution):
        if not ctx.guard_run():
            execution.blackboard["failure_reason"] = "safety_shutdown"
            return F
        policy = ctx.transfer_policy
        if policy.phase in self.until:
            return S
        trip = ctx.gate_tripped()
        if trip:
            execution.blackboard["failure_reason"] = f"force_gate_{trip}"
            ctx.hold()
            return F
        intent = policy.step(ctx.policy_input())
        ctx.apply_intent(intent)
        if policy.phase in self.until:
            return S
        if policy.phase == TransferPhase.ABORTED:
            execution.blackboard["failure_reason"] = "safety_shutdown"
            return F
        if policy.phase == TransferPhase.DONE:
            return S
        return R

    def cancel(self, ctx):
        ctx.hold()


REGISTRY = {
    "move_to_config": MoveToConfigBinding,
    "compute_frames": ComputeFramesBinding,
    "move_to_approach": MoveToApproachBinding,
    "execute_schema": ExecuteSchemaBinding,
    "transfer_step": TransferStepBinding,
}


def _guarded(name, *nodes):
    return TreeDefinition(name, Sequence(name, [
        Condition("watchdog_run", _guard), *nodes]))


def build_move_above_plate_tree() -> TreeDefinition:
    tree = _guarded("move_above_plate",
                    Timeout("t", Action("move", "move_to_config", REGISTRY,
                                        {"target": "above_plate"}), 25.0))
    tree.blackboard_schema = {}
    return tree


def build_acquire_food_tree(n_actions: int = 11) -> TreeDefinition:
    tree = _guarded(
        "acquire_food",
        Action("compute_frames", "compute_frames", REGISTRY),
        Timeout("t_approach", Action("move_to_approach", "move_to_approach", REGISTRY), 25.0),
        Timeout("t_schema", Action("execute_schema", "execute_schema", REGISTRY), 25.0),
        Timeout("t_rest", Action("move_to_rest", "move_to_config", REGISTRY,
                                 {"target": "above_plate"}), 25.0),
    )
    tree.blackboard_schema = {"food_id": "str", "arm_index": "int", "visual_context": "VisualContext"}
    return tree


def build_move_to_staging_tree() -> TreeDefinition:
    return _guarded("move_to_staging",
                    Timeout("t", Action("move", "move_to_config", REGISTRY,
                                        {"target": "staging"}), 25.0))


def build_move_to_mouth_tree() -> TreeDefinition:
    tree = _guarded("move_to_mouth",
                    Timeout("t", Action("approach_mouth", "transfer_step", REGISTRY,
                                        {"until": ["in_mouth", "outside_hold"],
                                         "fresh": True}), 45.0))
    return tree


def build_in_mouth_transfer_tree() -> TreeDefinition:
    return _guarded("in_mouth_transfer",
                    Timeout("t", Action("hand_off", "transfer_step", REGISTRY,
                                        {"until": ["retract"]}), 30.0))


def build_retract_tree() -> TreeDefinition:
    return _guarded("retract",
                    Timeout("t", Action("retract", "transfer_step", REGISTRY,
                                        {"until": ["done"]}), 30.0))


def build_stow_tree() -> TreeDefinition:
    return _guarded("stow",
                    Timeout("t", Action("move", "move_to_config", REGISTRY,
                                        {"target": "stow"}), 25.0))


TREE_BUILDERS = {
    "move_above_plate": build_move_above_plate_tree,
    "acquire_food": build_acquire_food_tree,
    "move_to_staging": build_move_to_staging_tree,
    "move_to_mouth": build_move_to_mouth_tree,
    "in_mouth_transfer": build_in_mouth_transfer_tree,
    "retract": build_retract_tree,
    "stow": build_stow_tree,
}
