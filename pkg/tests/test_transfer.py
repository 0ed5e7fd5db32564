import numpy as np
import pytest

from feedsim.geometry import Pose
from feedsim.sensors import CameraObservation, ForceTorqueReading
from feedsim.transfer import (
    IMPLAUSIBLE_JUMP,
    OUT_OF_RANGE,
    CommandIntent,
    InsufficientHistory,
    InteractionClass,
    LikelyRange,
    MouthEstimate,
    PolicyInput,
    ReadinessState,
    TransferConfig,
    TransferPerception,
    TransferPhase,
    TransferPolicy,
    WindowTooShort,
    check_readiness,
    classify_interaction,
    detect_spasm,
    filter_outliers,
    fuse_mouth_estimates,
)


def obs(camera_id, pos, conf=0.5, t=0.0, occluded=False):
    if occluded:
        return CameraObservation(camera_id, None, 0.0, True, t)
    return CameraObservation(camera_id, Pose(position=np.asarray(pos, dtype=float)),
                             conf, False, t)


def estimate(pos, t=0.0, conf=0.5):
    return MouthEstimate(Pose(position=np.asarray(pos, dtype=float)), conf, t, frozenset({0}))


def ft(f, t, seq=1):
    return ForceTorqueReading(np.asarray(f, dtype=float), np.zeros(3), t, seq)


def window(force_fn, n=21, dt=0.01):
    return [ft(force_fn(i * dt), i * dt, i + 1) for i in range(n)]


class TestFusion:
    def test_equal_confidence_midpoint(self):
        p = np.array([0.3, 0.0, 0.3])
        delta = np.array([0.01, 0.0, 0.0])
        fused = fuse_mouth_estimates([obs(0, p, 0.5), obs(1, p + delta, 0.5)])
        np.testing.assert_allclose(fused.pose.position, p + delta / 2, atol=1e-12)
        assert fused.sources == frozenset({0, 1})

    def test_single_visible_camera_passes_through(self):
        p = np.array([0.3, 0.1, 0.3])
        fused = fuse_mouth_estimates([obs(0, p, occluded=True), obs(1, p, 0.4)])
        np.testing.assert_allclose(fused.pose.position, p)
        assert fused.sources == frozenset({1})

    def test_all_occluded_returns_none(self):
        assert fuse_mouth_estimates([obs(0, None, occluded=True),
                                     obs(1, None, occluded=True)]) is None

    def test_confidence_weighting(self):
        a, b = np.zeros(3), np.array([0.01, 0, 0])
        fused = fuse_mouth_estimates([obs(0, a, 0.9), obs(1, b, 0.1)])
        np.testing.assert_allclose(fused.pose.position, 0.1 * b, atol=1e-12)

    def test_quaternion_sign_alignment(self):
        q = np.array([0.7071067811865476, 0, 0, 0.7071067811865476])
        o1 = CameraObservation(0, Pose(np.zeros(3), q), 0.5, False, 0.0)
        o2 = CameraObservation(1, Pose(np.zeros(3), -q), 0.5, False, 0.0)
        fused = fuse_mouth_estimates([o1, o2])
        assert abs(abs(np.dot(fused.pose.orientation, q)) - 1.0) < 1e-9


class TestOutlierFilter:
    def likely(self):
        return LikelyRange(np.array([0.3, 0.0, 0.3]), np.array([0.2, 0.2, 0.2]), 1.0)

    def test_accept_at_center(self):
        assert filter_outliers(estimate([0.3, 0.0, 0.3]), self.likely(), None) is None

    def test_reject_out_of_range(self):
        assert filter_outliers(estimate([1.3, 0.0, 0.3]), self.likely(), None) == OUT_OF_RANGE

    def test_reject_implausible_jump(self):
        prev = estimate([0.3, 0.0, 0.3], t=0.0)
        est = estimate([0.3, 0.2, 0.3], t=0.01)  # 20 m/s
        assert filter_outliers(est, self.likely(), prev) == IMPLAUSIBLE_JUMP

    def test_slow_motion_accepted(self):
        prev = estimate([0.3, 0.0, 0.3], t=0.0)
        est = estimate([0.3, 0.005, 0.3], t=0.01)  # 0.5 m/s < 1 m/s
        assert filter_outliers(est, self.likely(), prev) is None

    def test_calibration_box_covers_samples(self):
        rng = np.random.default_rng(0)
        samples = rng.normal([0.3, 0, 0.3], 0.01, (50, 3))
        likely = LikelyRange.calibrate(samples, margin=0.1)
        assert all(likely.contains(s) for s in samples)


class TestSpasmDetection:
    def test_stationary_head_no_spasm(self):
        history = [(i * 0.01, np.array([0.3, 0.0, 0.3])) for i in range(30)]
        assert detect_spasm(history, 0.15) is False

    def test_step_jump_detected(self):
        history = [(0.0, np.zeros(3)), (0.01, np.array([0.05, 0, 0]))]
        assert detect_spasm(history, 0.15) is True  # implied 5 m/s

    def test_insufficient_history(self):
        with pytest.raises(InsufficientHistory):
            detect_spasm([(0.0, np.zeros(3))])

    def test_camera_noise_alone_rarely_fires(self):
        rng = np.random.default_rng(1)
        fired = 0
        for _ in range(300):
            history = [(i * 0.01, rng.normal([0.3, 0, 0.3], 0.0021)) for i in range(40)]
            fired += detect_spasm(history, 0.15)
        assert fired / 300 < 0.02

    def test_three_cm_spasm_always_fires_through_noise(self):
        rng = np.random.default_rng(2)
        for trial in range(200):
            history = []
            for i in range(40):
                base = np.array([0.3, 0.0, 0.3])
                if i >= 20:
                    base = base + np.array([0.03, 0, 0])
                history.append((i * 0.01, rng.normal(base, 0.0021)))
            assert detect_spasm(history, 0.15) is True


class TestReadiness:
    def test_ready(self):
        r = check_readiness(mouth_open=True, talking=False, estimate_age=0.1)
        assert r.ready

    def test_talking_blocks(self):
        r = check_readiness(True, True, 0.1)
        assert not r.ready and r.reason == "talking"

    def test_mouth_closed_blocks(self):
        r = check_readiness(False, False, 0.1)
        assert not r.ready and r.reason == "mouth_closed"

    def test_persistent_absence_blocks_first(self):
        r = check_readiness(False, True, 0.6)
        assert not r.ready and r.reason == "no_estimate"

    def test_brief_absence_does_not_block(self):
        r = check_readiness(True, False, 0.3)
        assert r.ready


class TestClassification:
    CFG = TransferConfig()

    def motion_still(self):
        return [(i * 0.01, np.array([0.3, 0.0, 0.3])) for i in range(21)]

    def test_window_too_short(self):
        with pytest.raises(WindowTooShort):
            classify_interaction(window(lambda t: [0, 0, 0], n=5),
                                 self.motion_still(), TransferPhase.IN_MOUTH, self.CFG)

    def test_archetype_no_contact(self):
        w = window(lambda t: [0.05, 0, -0.1])
        assert classify_interaction(w, self.motion_still(), TransferPhase.IN_MOUTH,
                                    self.CFG) == InteractionClass.NO_CONTACT

    def test_archetype_intentional_bite(self):
        # 2 N press on the tines for 0.15 s, then release below 0.2 N
        w = window(lambda t: [0, 0, -2.0] if t <= 0.15 else [0, 0, -0.05])
        assert classify_interaction(w, self.motion_still(), TransferPhase.IN_MOUTH,
                                    self.CFG) == InteractionClass.INTENTIONAL_BITE

    def test_bite_requires_handoff_phase(self):
        w = window(lambda t: [0, 0, -2.0] if t <= 0.15 else [0, 0, -0.05])
        got = classify_interaction(w, self.motion_still(), TransferPhase.APPROACH_MOUTH,
                                   self.CFG)
        assert got != InteractionClass.INTENTIONAL_BITE

    def test_archetype_involuntary(self):
        w = window(lambda t: [0.4, 0, 0])
        motion = list(self.motion_still())
        motion[12] = (0.12, np.array([0.35, 0.0, 0.3]))  # 5 cm jump
        motion[13] = (0.13, np.array([0.35, 0.0, 0.3]))
        assert classify_interaction(w, motion, TransferPhase.IN_MOUTH,
                                    self.CFG) == InteractionClass.INVOLUNTARY

    def test_archetype_in_mouth_manipulation(self):
        w = window(lambda t: [1.0, 0.3, 0])  # sustained lateral, never released
        assert classify_interaction(w, self.motion_still(), TransferPhase.IN_MOUTH,
                                    self.CFG) == InteractionClass.IN_MOUTH_MANIPULATION

    def test_archetype_incidental(self):
        w = window(lambda t: [0.5, 0, 0] if 0.08 <= t <= 0.1 else [0, 0, 0])
        assert classify_interaction(w, self.motion_still(), TransferPhase.APPROACH_MOUTH,
                                    self.CFG) == InteractionClass.INCIDENTAL

    def test_archetype_suite_100_percent(self):
        # labeled suite, one archetype per class, separable by construction
        cases = [
            (window(lambda t: [0.0, 0, 0]), self.motion_still(),
             TransferPhase.IN_MOUTH, InteractionClass.NO_CONTACT),
            (window(lambda t: [0, 0, -2.0] if t <= 0.15 else [0, 0, 0.0]),
             self.motion_still(), TransferPhase.IN_MOUTH, InteractionClass.INTENTIONAL_BITE),
            (window(lambda t: [0.4, 0, 0]),
             [(i * 0.01, np.array([0.3 + (0.05 if i >= 10 else 0.0), 0, 0.3]))
              for i in range(21)],
             TransferPhase.IN_MOUTH, InteractionClass.INVOLUNTARY),
            (window(lambda t: [1.2, 0, 0]), self.motion_still(),
             TransferPhase.IN_MOUTH, InteractionClass.IN_MOUTH_MANIPULATION),
            (window(lambda t: [0.5, 0, 0] if 0.08 <= t <= 0.1 else [0, 0, 0]),
             self.motion_still(), TransferPhase.APPROACH_MOUTH, InteractionClass.INCIDENTAL),
        ]
        hits = sum(classify_interaction(w, m, ph, self.CFG) == label
                   for w, m, ph, label in cases)
        assert hits == len(cases)


class TestPolicy:
    def make_inputs(self, policy, tip, ready=True, fused_pos=(0.4, 0.0, 0.35),
                    spasm=False, guard=True, interaction=None, now=0.0):
        fused = estimate(fused_pos, t=now) if fused_pos is not None else None
        readiness = ReadinessState(True) if ready else ReadinessState(False, "talking")
        return PolicyInput(now=now, tip_position=np.asarray(tip, dtype=float),
                           guard_run=guard, readiness=readiness, fused=fused,
                           mouth_normal=np.array([0.0, -1.0, 0.0]), spasm=spasm,
                           interaction=interaction)

    def make_policy(self, mode="outside_mouth"):
        return TransferPolicy(TransferConfig(mode=mode, outside_distance=0.05),
                              staging_position=np.array([0.3, 0.2, 0.3]))

    def test_staging_then_wait_then_approach(self):
        p = self.make_policy()
        intent = p.step(self.make_inputs(p, [0.1, 0.0, 0.3]))
        assert intent.kind == "servo" and p.phase == TransferPhase.APPROACH_STAGING
        p.step(self.make_inputs(p, [0.3, 0.2, 0.3]))
        assert p.phase == TransferPhase.WAIT_READY
        p.step(self.make_inputs(p, [0.3, 0.2, 0.3], now=0.01))
        assert p.phase == TransferPhase.APPROACH_MOUTH

    def advance_to_approach(self, p):
        p.step(self.make_inputs(p, [0.3, 0.2, 0.3]))
        p.step(self.make_inputs(p, [0.3, 0.2, 0.3], now=0.01))
        assert p.phase == TransferPhase.APPROACH_MOUTH

    def test_retarget_uses_fused_estimate_and_offset(self):
        p = self.make_policy()
        self.advance_to_approach(p)
        mouth = np.array([0.4, 0.0, 0.35])
        intent = p.step(self.make_inputs(p, [0.3, 0.2, 0.3], fused_pos=mouth, now=0.4))
        expected = mouth + 0.05 * np.array([0.0, -1.0, 0.0])
        np.testing.assert_allclose(intent.target_position, expected)

    def test_not_ready_holds_then_resumes(self):
        p = self.make_policy()
        self.advance_to_approach(p)
        intent = p.step(self.make_inputs(p, [0.3, 0.2, 0.3], ready=False, now=0.4))
        assert intent.kind == "hold" and p.phase == TransferPhase.APPROACH_MOUTH
        intent = p.step(self.make_inputs(p, [0.3, 0.2, 0.3], now=0.41))
        assert intent.kind == "servo"

    def test_spasm_holds_compliantly_until_stillness(self):
        p = self.make_policy()
        self.advance_to_approach(p)
        intent = p.step(self.make_inputs(p, [0.3, 0.2, 0.3], spasm=True, now=0.4))
        assert intent.kind == "comply"
        # quiet but within the stillness window: still holding
        intent = p.step(self.make_inputs(p, [0.3, 0.2, 0.3], now=0.5))
        assert intent.kind == "comply"
        intent = p.step(self.make_inputs(p, [0.3, 0.2, 0.3], now=0.85))
        assert intent.kind == "servo"

    def test_arrival_outside_mouth_holds(self):
        p = self.make_policy()
        self.advance_to_approach(p)
        p.quiet_since = -10.0  # already still
        mouth = np.array([0.4, 0.0, 0.35])
        target = mouth + 0.05 * np.array([0.0, -1.0, 0.0])
        p.step(self.make_inputs(p, target + 1e-4, fused_pos=mouth, now=0.4))
        assert p.phase == TransferPhase.OUTSIDE_HOLD

    def test_bite_triggers_retract_within_one_tick(self):
        p = self.make_policy()
        p.phase = TransferPhase.OUTSIDE_HOLD
        p.breadcrumbs = [np.array([0.3, 0.2, 0.3])]
        p.step(self.make_inputs(p, [0.35, -0.05, 0.35],
                                interaction=InteractionClass.INTENTIONAL_BITE, now=1.0))
        assert p.phase == TransferPhase.RETRACT

    def test_in_mouth_manipulation_complies_in_place(self):
        p = self.make_policy(mode="in_mouth")
        p.phase = TransferPhase.IN_MOUTH
        p.quiet_since = -10.0
        intent = p.step(self.make_inputs(
            p, [0.4, 0.0, 0.35], interaction=InteractionClass.IN_MOUTH_MANIPULATION, now=1.0))
        assert intent.kind == "comply" and p.phase == TransferPhase.IN_MOUTH

    def test_watchdog_shutdown_aborts_immediately(self):
        p = self.make_policy()
        self.advance_to_approach(p)
        intent = p.step(self.make_inputs(p, [0.3, 0.2, 0.3], guard=False, now=0.4))
        assert intent.kind == "hold" and p.phase == TransferPhase.ABORTED

    def test_retract_walks_breadcrumbs_backward(self):
        p = self.make_policy()
        p.phase = TransferPhase.RETRACT
        crumbs = [np.array([0.3, 0.2, 0.3]), np.array([0.35, 0.1, 0.32]),
                  np.array([0.38, 0.0, 0.34])]
        p.breadcrumbs = [c.copy() for c in crumbs]
        intent = p.step(self.make_inputs(p, [0.39, -0.02, 0.35], now=2.0))
        np.testing.assert_allclose(intent.target_position, crumbs[-1])
        intent = p.step(self.make_inputs(p, crumbs[-1], now=2.01))
        np.testing.assert_allclose(intent.target_position, crumbs[-2])
        p.step(self.make_inputs(p, crumbs[-2], now=2.02))
        p.step(self.make_inputs(p, crumbs[-3], now=2.03))
        assert p.phase == TransferPhase.DONE


class TestPerceptionPipeline:
    def test_ingest_accepts_and_tracks_history(self):
        likely = LikelyRange(np.array([0.3, 0, 0.3]), np.array([0.2, 0.2, 0.2]))
        tp = TransferPerception(likely)
        for i in range(10):
            fused = tp.ingest([obs(0, [0.3, 0, 0.3], 0.5, t=i * 0.01)], now=i * 0.01)
            assert fused is not None
        assert len(tp.history) == 10
        assert tp.estimate_age(0.09) == pytest.approx(0.0)
        assert tp.spasm_fired() is False

    def test_rejected_estimates_not_in_history(self):
        likely = LikelyRange(np.array([0.3, 0, 0.3]), np.array([0.05, 0.05, 0.05]))
        tp = TransferPerception(likely)
        assert tp.ingest([obs(0, [0.9, 0, 0.3], 0.5)], now=0.0) is None
        assert tp.history == [] and tp.rejections[0][1] == OUT_OF_RANGE
