import threading
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from feedsim.api import create_app
from feedsim.runtime import FeedingRuntime
from feedsim.scenario import nominal_meal_scenario


@pytest.fixture()
def client(action_library):
    runtime = FeedingRuntime(nominal_meal_scenario(bites=1, seed=42),
                             library=action_library)
    app = create_app(runtime, pace="fast")
    with TestClient(app) as c:
        c.runtime = runtime
        deadline = time.time() + 5
        while not runtime.guard_run() and time.time() < deadline:
            time.sleep(0.01)
        assert runtime.guard_run()
        yield c


def wait_terminal(client, action_id, timeout=20.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        body = client.get(f"/actions/{action_id}").json()
        if body["state"] in ("succeeded", "failed", "preempted"):
            return body
        time.sleep(0.02)
    raise TimeoutError(action_id)


class TestStateAndParams:
    def test_state_shape(self, client):
        body = client.get("/state").json()
        for key in ("time", "guard", "estop", "arm", "params", "plate"):
            assert key in body

    def test_params_roundtrip(self, client):
        r = client.patch("/params", json={"speed_scale": 0.5})
        assert r.status_code == 200
        body = r.json()
        assert body["speed_scale"] == 0.5 and body["revision"] == 1
        assert client.get("/params").json()["speed_scale"] == 0.5

    def test_params_validation_error_names_field(self, client):
        r = client.patch("/params", json={"speed_scale": 1.5})
        assert r.status_code == 422
        assert r.json()["detail"]["field"] == "speed_scale"

    def test_outside_distance_patch(self, client):
        r = client.patch("/params", json={"outside_distance": 0.08,
                                          "transfer_mode": "outside_mouth"})
        assert r.status_code == 200
        assert r.json()["outside_distance"] == 0.08


class TestActionEndpoints:
    def test_lifecycle_move_above_plate(self, client):
        r = client.post("/actions", json={"tree": "move_above_plate"})
        assert r.status_code == 202
        body = wait_terminal(client, r.json()["id"])
        assert body["state"] == "succeeded"

    def test_second_action_busy(self, client):
        r1 = client.post("/actions", json={"tree": "move_above_plate"})
        assert r1.status_code == 202
        r2 = client.post("/actions", json={"tree": "stow"})
        assert r2.status_code == 409
        assert r2.json()["detail"]["error"] == "busy"
        wait_terminal(client, r1.json()["id"])

    def test_parallel_starts_accept_exactly_one(self, client):
        results = []

        def fire():
            results.append(client.post("/actions", json={"tree": "move_above_plate"}))

        threads = [threading.Thread(target=fire) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        codes = sorted(r.status_code for r in results)
        assert codes.count(202) == 1
        assert all(c in (202, 409) for c in codes)
        accepted = next(r for r in results if r.status_code == 202)
        wait_terminal(client, accepted.json()["id"])

    def test_preempt_flow(self, client):
        r = client.post("/actions", json={"tree": "move_above_plate"})
        action_id = r.json()["id"]
        p = client.post(f"/actions/{action_id}/preempt")
        assert p.status_code == 200
        body = wait_terminal(client, action_id)
        assert body["state"] == "preempted"
        p2 = client.post(f"/actions/{action_id}/preempt")
        assert p2.status_code == 409
        r2 = client.post("/actions", json={"tree": "move_above_plate"})
        assert r2.status_code == 202
        wait_terminal(client, r2.json()["id"])

    def test_unknown_action_id(self, client):
        assert client.get("/actions/nope").status_code == 404
        assert client.post("/actions/nope/preempt").status_code == 404

    def test_validation_error(self, client):
        r = client.post("/actions", json={"tree": "acquire_food",
                                          "args": {"food": "bogus"}})
        assert r.status_code == 422

    def test_trees_endpoint_serializes_all(self, client):
        body = client.get("/trees").json()
        assert set(body) == {"move_above_plate", "acquire_food", "move_to_staging",
                             "move_to_mouth", "in_mouth_transfer", "retract", "stow"}
        assert body["acquire_food"]["root"]["kind"] == "sequence"


class TestEStopEndpoint:
    def test_estop_idle_then_lockout(self, client):
        r = client.post("/estop")
        assert r.status_code == 200 and r.json()["engaged"]
        r2 = client.post("/actions", json={"tree": "move_above_plate"})
        assert r2.status_code == 423
        # double click stays acknowledged
        assert client.post("/estop").status_code == 200
        reset = client.post("/estop/reset").json()
        assert reset["ok"] and not reset["engaged"]

    def test_estop_during_motion_stops_fast(self, client):
        rt = client.runtime
        r = client.post("/actions", json={"tree": "move_above_plate"})
        deadline = time.time() + 5
        while np.linalg.norm(rt.world.arm.velocities) == 0 and time.time() < deadline:
            time.sleep(0.005)
        assert np.linalg.norm(rt.world.arm.velocities) > 0
        t0 = time.time()
        resp = client.post("/estop")
        assert resp.status_code == 200
        while np.linalg.norm(rt.world.arm.velocities) > 0 and time.time() - t0 < 2:
            time.sleep(0.002)
        assert np.allclose(rt.world.arm.velocities, 0.0)
        latency = client.get("/state").json()["estop"]["stop_latency_ms"]
        assert latency is not None and latency < 50.0


class TestTelemetryStream:
    def test_stream_frames_increasing(self, client):
        with client.websocket_connect("/telemetry") as ws:
            frames = [ws.receive_json() for _ in range(3)]
        times = [f["t"] for f in frames]
        assert times == sorted(times) and len(set(times)) == 3
        for key in ("q", "watchdog", "utensil_intact"):
            assert key in frames[0]
