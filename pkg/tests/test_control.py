import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feedsim.control import (
    CompliantController,
    ControllerKind,
    ControllerManagerState,
    EmptyPath,
    GateConfig,
    GatedVelocityController,
    ImpedanceGains,
    InvalidScale,
    SwitchWhileEstopped,
    TrajectoryTracker,
    default_gains,
    gate_check,
    lock_manager,
    plan_joint_path,
    retime_trajectory,
    switch_controller,
    tick_compliant,
    tick_gated_velocity,
    unlock_manager,
)
from feedsim.sensors import ForceTorqueReading
from feedsim.world import JointState, default_arm_model, step_world

VEL = np.ones(6)
ACC = np.full(6, np.inf)


def reading(f=(0, 0, 0), tau=(0, 0, 0), t=0.0, seq=1):
    return ForceTorqueReading(np.array(f, dtype=float), np.array(tau, dtype=float), t, seq)


class TestRetiming:
    def test_equal_waypoints_collapse_to_zero_duration(self):
        q = np.zeros(6)
        traj = retime_trajectory([q, q], VEL, ACC)
        assert traj.duration == 0.0 and len(traj.waypoints) == 1

    def test_single_joint_unit_move_takes_distance_over_velocity(self):
        q0, q1 = np.zeros(6), np.zeros(6).copy()
        q1[0] = 1.0
        traj = retime_trajectory([q0, q1], VEL, ACC, speed_scale=1.0)
        assert traj.duration == pytest.approx(1.0, abs=1e-12)

    def test_half_scale_doubles_duration(self):
        q0, q1 = np.zeros(6), np.zeros(6).copy()
        q1[0] = 1.0
        traj = retime_trajectory([q0, q1], VEL, ACC, speed_scale=0.5)
        assert traj.duration == pytest.approx(2.0, abs=1e-12)

    def test_scale_law_holds_with_finite_acceleration(self):
        q0, q1 = np.zeros(6), np.full(6, 0.8)
        acc = np.full(6, 2.0)
        t_full = retime_trajectory([q0, q1], VEL, acc, 1.0).duration
        t_half = retime_trajectory([q0, q1], VEL, acc, 0.5).duration
        assert t_half == pytest.approx(2.0 * t_full, rel=1e-9)

    def test_errors(self):
        with pytest.raises(EmptyPath):
            retime_trajectory([np.zeros(6)], VEL, ACC)
        with pytest.raises(InvalidScale):
            retime_trajectory([np.zeros(6), np.ones(6)], VEL, ACC, speed_scale=1.5)
        with pytest.raises(InvalidScale):
            retime_trajectory([np.zeros(6), np.ones(6)], VEL, ACC, speed_scale=0.0)

    def test_sampled_positions_hit_endpoints(self):
        rng = np.random.default_rng(2)
        q0, q1, q2 = rng.uniform(-1, 1, 6), rng.uniform(-1, 1, 6), rng.uniform(-1, 1, 6)
        traj = retime_trajectory([q0, q1, q2], VEL, np.full(6, 3.0), 0.7)
        np.testing.assert_allclose(traj.sample(0.0)[0], q0, atol=1e-9)
        np.testing.assert_allclose(traj.sample(traj.duration)[0], q2, atol=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.05, 1.0))
    def test_sampled_velocities_respect_scaled_limits(self, seed, scale):
        rng = np.random.default_rng(seed)
        path = [rng.uniform(-2, 2, 6) for _ in range(rng.integers(2, 5))]
        vel = rng.uniform(0.5, 2.0, 6)
        acc = rng.uniform(1.0, 5.0, 6)
        traj = retime_trajectory(path, vel, acc, scale)
        if traj.duration == 0:
            return
        for t in np.linspace(0, traj.duration, 197):
            _, v = traj.sample(t)
            assert np.all(np.abs(v) <= vel * scale + 1e-9)


class TestGating:
    def test_below_threshold_passes(self):
        cmd, trip = tick_gated_velocity(np.ones(6), reading(f=(3.9, 0, 0)), GateConfig(4.0, 4.0))
        assert trip is None and np.array_equal(cmd, np.ones(6))

    def test_above_threshold_aborts_with_zero_command(self):
        cmd, trip = tick_gated_velocity(np.ones(6), reading(f=(4.1, 0, 0)), GateConfig(4.0, 4.0))
        assert trip == "force" and np.array_equal(cmd, np.zeros(6))

    def test_torque_norm_trips(self):
        cmd, trip = tick_gated_velocity(np.ones(6), reading(tau=(0, 3, 3)), GateConfig(4.0, 4.0))
        assert trip == "torque"

    def test_stale_reading_aborts(self):
        ctrl = GatedVelocityController(GateConfig(), control_period=0.01)
        cmd, trip = ctrl.tick(np.ones(6), reading(t=0.0), now=0.05)
        assert trip == "stale" and np.array_equal(cmd, np.zeros(6))

    def test_missing_reading_aborts(self):
        ctrl = GatedVelocityController(GateConfig())
        cmd, trip = ctrl.tick(np.ones(6), None, now=0.0)
        assert trip == "stale"

    def test_latch_until_rearm(self):
        ctrl = GatedVelocityController(GateConfig(4.0, 4.0))
        ctrl.tick(np.ones(6), reading(f=(9, 0, 0)), now=0.0)
        cmd, trip = ctrl.tick(np.ones(6), reading(), now=0.0)
        assert trip == "force" and np.array_equal(cmd, np.zeros(6))
        ctrl.rearm()
        cmd, trip = ctrl.tick(np.ones(6), reading(), now=0.0)
        assert trip is None and np.array_equal(cmd, np.ones(6))

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.1, 20), st.floats(0.1, 20), st.floats(0.1, 20), st.floats(0.1, 20))
    def test_gate_monotonicity(self, f, tau, g1, g2):
        # a reading tripping a gate trips every smaller gate
        r = reading(f=(f, 0, 0), tau=(0, tau, 0))
        big, small = GateConfig(max(g1, g2), max(g1, g2)), GateConfig(min(g1, g2), min(g1, g2))
        if gate_check(r, big) is not None:
            assert gate_check(r, small) is not None


class TestCompliant:
    def test_equilibrium_zero_torque(self):
        q = np.ones(6)
        tau = tick_compliant(q, q * 0, q, q * 0, default_gains())
        np.testing.assert_allclose(tau, np.zeros(6))

    def test_unit_error_single_joint(self):
        gains = ImpedanceGains(np.full(6, 10.0), np.full(6, 1e-9), np.full(6, 100.0))
        q = np.zeros(6)
        target = np.zeros(6)
        target[0] = 1.0
        tau = tick_compliant(q, np.zeros(6), target, np.zeros(6), gains)
        assert tau[0] == pytest.approx(10.0, abs=1e-6)
        np.testing.assert_allclose(tau[1:], np.zeros(5), atol=1e-9)

    def test_clamp_is_last(self):
        gains = ImpedanceGains(np.full(6, 250.0), np.full(6, 1e-9), np.full(6, 100.0))
        target = np.ones(6)
        tau = tick_compliant(np.zeros(6), np.zeros(6), target, np.zeros(6), gains)
        np.testing.assert_allclose(tau, np.full(6, 100.0))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000))
    def test_torque_always_within_limits(self, seed):
        rng = np.random.default_rng(seed)
        gains = ImpedanceGains(rng.uniform(1, 500, 6), rng.uniform(0.1, 50, 6),
                               rng.uniform(0.5, 50, 6))
        tau = tick_compliant(rng.uniform(-3, 3, 6), rng.uniform(-2, 2, 6),
                             rng.uniform(-3, 3, 6), rng.uniform(-2, 2, 6), gains)
        assert np.all(np.abs(tau) <= gains.torque_limit + 1e-12)


class TestTrajectoryTracker:
    def test_tracks_to_target_through_world(self):
        arm = default_arm_model()
        w = __import__("feedsim.world", fromlist=["WorldState"]).WorldState(
            arm_model=arm, arm=JointState(np.zeros(6)), plate=[],
            head=__import__("feedsim.world", fromlist=["HeadModel"]).HeadModel(
                base_pose=__import__("feedsim.geometry", fromlist=["Pose"]).Pose(
                    position=np.array([0.4, -0.5, 0.4]))),
            utensil=__import__("feedsim.world", fromlist=["UtensilState"]).UtensilState(),
            rng_seed=0)
        target = np.array([0.4, 0.3, -0.2, 0.5, 0.1, -0.3])
        traj = retime_trajectory([np.zeros(6), target], arm.velocity_limits(),
                                 np.full(6, 4.0), 1.0)
        tracker = TrajectoryTracker(traj, arm.velocity_limits())
        for _ in range(int(traj.duration / 0.01) + 50):
            cmd = tracker.tick(w.arm.angles)
            step_world(w, cmd, 0.01)
            if tracker.done(w.arm.angles):
                break
        assert tracker.done(w.arm.angles)
        np.testing.assert_allclose(w.arm.angles, target, atol=1e-6)


class TestManager:
    def test_switch_sequence(self):
        mgr = ControllerManagerState()
        switch_controller(mgr, ControllerKind.GATED_VELOCITY)
        assert mgr.active == ControllerKind.GATED_VELOCITY and mgr.switch_count == 1

    def test_switch_emits_zero_on_deactivation(self):
        mgr = ControllerManagerState()
        switch_controller(mgr, ControllerKind.GATED_VELOCITY)
        assert not mgr.zero_pending  # idle -> active needs no flush
        switch_controller(mgr, ControllerKind.COMPLIANT)
        assert mgr.zero_pending

    def test_switch_refused_while_locked(self):
        mgr = ControllerManagerState()
        lock_manager(mgr)
        with pytest.raises(SwitchWhileEstopped):
            switch_controller(mgr, ControllerKind.TRAJECTORY)
        unlock_manager(mgr)
        switch_controller(mgr, ControllerKind.TRAJECTORY)
        assert mgr.active == ControllerKind.TRAJECTORY


class TestPlanning:
    def test_straight_line_when_clear(self):
        arm = default_arm_model()
        path = plan_joint_path(arm, np.zeros(6), np.array([0.5, 0.3, 0.2, 0, 0, 0]), [])
        assert len(path) == 2

    def test_via_point_inserted_around_obstacle(self):
        arm = default_arm_model()
        q_a = np.array([0.0, 0.9, 1.2, 0.0, 0.6, 0.0])
        q_b = np.array([1.2, 0.9, 1.2, 0.0, 0.6, 0.0])
        from feedsim.world import forward_kinematics
        mid = forward_kinematics(arm, 0.5 * (q_a + q_b)).position
        path = plan_joint_path(arm, q_a, q_b, [(mid, 0.05)])
        assert len(path) == 3
        for q in [path[1]]:
            tip = forward_kinematics(arm, q).position
            assert np.linalg.norm(tip - mid) > 0.05
