"""HTTP/WebSocket service boundary. The browser app is the seat of logic;
this layer only exposes the runtime: start/monitor/preempt actions, read and
write parameters, stream telemetry, and an e-stop that can never fail.

All robot-affecting requests serialize through the runtime lock; the e-stop
bypasses action queuing entirely and latches before its response returns.
"""

from __future__ import annotations

import queue
import threading
import time
from contextlib import asynccontextmanager
from typing import Optional

import anyio
from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect

from .runtime import (
    AlreadyTerminal,
    Busy,
    FeedingRuntime,
    SafetyLockout,
    UnknownId,
    ValidationFailed,
)


class TickThread(threading.Thread):
    """Steps the runtime continuously; 'real' pace sleeps to hold 100 Hz,
    'fast' runs the simulation as quickly as the host allows."""

    def __init__(self, runtime: FeedingRuntime, pace: str = "real"):
        super().__init__(daemon=True, name="feedsim-tick")
        self.runtime = runtime
        self.pace = pace
        self.stop_event = threading.Event()

    def run(self):
        dt = self.runtime.dt
        next_deadline = time.monotonic()
        while not self.stop_event.is_set():
            self.runtime.tick()
            if self.pace == "real":
                next_deadline += dt
                delay = next_deadline - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
                else:
                    next_deadline = time.monotonic()

    def stop(self):
        self.stop_event.set()
        self.join(timeout=2.0)


def create_app(runtime: FeedingRuntime, pace: str = "real",
               manage_ticks: bool = True) -> FastAPI:
    ticker: Optional[TickThread] = None

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        nonlocal ticker
        if manage_ticks:
            ticker = TickThread(runtime, pace)
            ticker.start()
        yield
        if ticker is not None:
            ticker.stop()

    app = FastAPI(title="feedsim", lifespan=lifespan)
    app.state.runtime = runtime

    @app.get("/state")
    def get_state():
        return runtime.state_summary()

    @app.post("/actions", status_code=202)
    def start_action(body: dict):
        tree = body.get("tree")
        args = body.get("args", {})
        if not isinstance(tree, str):
            raise HTTPException(422, detail={"error": "validation", "field": "tree"})
        try:
            record = runtime.start_action(tree, args)
        except Busy as e:
            raise HTTPException(409, detail={"error": "busy", "message": str(e)})
        except SafetyLockout as e:
            raise HTTPException(423, detail={"error": "safety_lockout", "message": str(e)})
        except ValidationFailed as e:
            raise HTTPException(422, detail={"error": "validation", "field": e.field,
                                             "message": str(e)})
        return record.to_dict()

    @app.get("/actions/{action_id}")
    def action_status(action_id: str):
        try:
            return runtime.action_status(action_id).to_dict()
        except UnknownId:
            raise HTTPException(404, detail={"error": "unknown_id"})

    @app.post("/actions/{action_id}/preempt")
    def preempt(action_id: str):
        try:
            record = runtime.preempt_action(action_id)
        except UnknownId:
            raise HTTPException(404, detail={"error": "unknown_id"})
        except AlreadyTerminal as e:
            raise HTTPException(409, detail={"error": "already_terminal", "state": str(e)})
        return record.to_dict()

    @app.get("/params")
    def get_params():
        return runtime.params.get().to_dict()

    @app.patch("/params")
    def patch_params(body: dict):
        try:
            updated = runtime.params.patch(body)
        except ValidationFailed as e:
            raise HTTPException(422, detail={"error": "validation", "field": e.field,
                                             "message": str(e)})
        return updated.to_dict()

    @app.post("/estop")
    def estop():
        # infallible by contract: acknowledge only after the latch is set
        runtime.trigger_estop("software")
        return {"engaged": True, "engage_time": runtime.estop.engage_time}

    @app.post("/estop/reset")
    def estop_reset():
        ok = runtime.reset_estop_latch()
        return {"ok": ok, "engaged": runtime.estop.engaged}

    @app.get("/trees")
    def get_trees():
        return {name: builder().describe() for name, builder in runtime.trees.items()}

    @app.websocket("/telemetry")
    async def telemetry(ws: WebSocket):
        await ws.accept()
        frames: queue.Queue = queue.Queue(maxsize=256)

        def listener(frame):
            try:
                frames.put_nowait(frame)
            except queue.Full:
                pass   # slow consumer: drop rather than stall the control loop

        runtime.telemetry_listeners.append(listener)
        try:
            while True:
                frame = await anyio.to_thread.run_sync(frames.get)
                await ws.send_json(frame)
        except (WebSocketDisconnect, RuntimeError):
            pass
        finally:
            if listener in runtime.telemetry_listeners:
                runtime.telemetry_listeners.remove(listener)

    return app
