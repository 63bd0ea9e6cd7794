"""Live simulation service: runs the tick loop at wall-clock rate, streams
frame snapshots to websocket clients at up to 20 Hz, applies steering and
goal commands at tick boundaries, and serves the static steering UI plus a
one-shot GET /graph geometry dump.

One asyncio task owns the world; clients only ever see immutable frame
dicts. Slow clients skip intermediate frames, they never block the loop.
"""

from __future__ import annotations

import asyncio
import hashlib
import json
import logging
import math
from pathlib import Path

from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import FileResponse, JSONResponse

from .estimator import EstimatorError
from .hmm import HmmError
from .messages import MessageError, frame_message, parse_command
from .sim import Scenario, Simulation
from .validation import WorkerPose, wrap_angle
from .voronoi import GraphError

log = logging.getLogger("vorintent.service")

FRAME_INTERVAL = 1.0 / 20.0


class SteeredWorker:
    """Server-authoritative worker for live mode: integrates the latest
    steering command each tick, refusing moves into occupied cells."""

    def __init__(self, start: tuple[float, float], heading: float, speed: float, grid):
        self.x, self.y = start
        self.theta = heading
        self.max_speed = speed
        self.grid = grid
        self.command_heading = heading
        self.command_speed = 0.0

    def steer(self, heading: float, speed: float) -> None:
        self.command_heading = wrap_angle(heading)
        self.command_speed = max(0.0, min(1.0, speed))

    def advance(self, dt: float, t: float) -> WorkerPose:
        if self.command_speed > 0.0:
            self.theta = self.command_heading
            step = self.max_speed * self.command_speed * dt
            nx = self.x + math.cos(self.theta) * step
            ny = self.y + math.sin(self.theta) * step
            if self.grid.is_free_world(nx, ny):
                self.x, self.y = nx, ny
        return WorkerPose(self.x, self.y, self.theta, t)


class LiveSession:
    """Owns a Simulation driven in live mode with a steered worker."""

    def __init__(self, scenario: Scenario, rt_factor: float = 1.0):
        self.scenario = scenario
        self.rt_factor = rt_factor
        self.sim = Simulation(scenario)
        w = scenario.worker
        start = self.sim.worker.pose(0.0)
        self.worker = SteeredWorker((start.x, start.y), start.theta,
                                    float(w.get("speed", 0.8)), self.sim.grid)
        self.commands: asyncio.Queue = asyncio.Queue(maxsize=256)
        self.frame: dict | None = None
        self.frame_event = asyncio.Event()
        self.paused = False
        self.errors: list[dict] = []
        self._graph_digest = hashlib.sha256(
            json.dumps(self.sim.graph.to_json(), sort_keys=True).encode()
        ).hexdigest()[:16]

    # -- command application at tick boundaries ---------------------------

    def _drain_commands(self) -> list[dict]:
        notes = []
        steer = None
        while True:
            try:
                cmd = self.commands.get_nowait()
            except asyncio.QueueEmpty:
                break
            kind = cmd["type"]
            if kind == "steer":
                steer = cmd  # idempotent per tick: last wins
            elif kind == "pause":
                self.paused = True
            elif kind == "resume":
                self.paused = False
            elif kind == "add_goal":
                try:
                    self.sim.estimator.add_goal(x=cmd["x"], y=cmd["y"],
                                                name=cmd.get("name"))
                    self._graph_digest = self._graph_digest[:15] + "+"
                    notes.append({"type": "event", "event": "goal_added"})
                except (EstimatorError, HmmError, GraphError) as exc:
                    notes.append({"type": "error", "detail": str(exc)})
            elif kind == "remove_goal":
                try:
                    self.sim.estimator.remove_goal(int(cmd["index"]))
                    notes.append({"type": "event", "event": "goal_removed"})
                except (EstimatorError, HmmError) as exc:
                    notes.append({"type": "error", "detail": str(exc)})
            elif kind == "reset":
                notes.append({"type": "error",
                              "detail": "reset requires restarting the service"})
        if steer is not None:
            self.worker.steer(steer["heading"], steer["speed"])
        return notes

    def _tick_live(self) -> None:
        sim = self.sim
        sim.tick_index += 1
        sim.t = sim.tick_index * sim.dt
        sim.fleet.step(sim.t)
        disks = sim.fleet.disks(sim.t)
        sim.estimator.planner.sync_robot_obstacles(disks)
        pose = self.worker.advance(sim.dt, sim.t)
        noisy = sim.noise.apply(pose)
        sim.estimator.observe(noisy, disks)
        est = sim.estimator
        self.frame = frame_message(
            tick=sim.tick_index, t=sim.t, worker=pose, robots=disks,
            goals=est.goal_labels(), P=est.probabilities,
            v_hat=est.lowpass.state, argmax_label=est.argmax_label(),
            graph_digest=self._graph_digest,
        )

    async def run(self) -> None:
        period = self.sim.dt / max(self.rt_factor, 1e-9)
        try:
            while True:
                notes = self._drain_commands()
                for n in notes:
                    self.errors.append(n)
                if not self.paused:
                    self._tick_live()
                    self.frame_event.set()
                await asyncio.sleep(period)
        except asyncio.CancelledError:
            pass

    def graph_payload(self) -> dict:
        layout = self.scenario.layout
        g = self.sim.graph.to_json()
        return {
            "size_m": list(layout.size),
            "cell_size_m": self.sim.grid.cell_size,
            "racks": [{"x": r.x, "y": r.y, "w": r.w, "h": r.h} for r in layout.racks],
            "walls": [{"x1": w.x1, "y1": w.y1, "x2": w.x2, "y2": w.y2,
                       "width": w.width} for w in layout.walls],
            "nodes": g["nodes"],
            "edges": [
                {"a": e["a"], "b": e["b"], "length_m": e["length_m"],
                 "path": _edge_world_path(self.sim.graph, e)}
                for e in g["edges"]
            ],
            "goals": g["goals"],
            "lattice": [{"id": nid, "x": n.x, "y": n.y}
                        for nid, n in layout.nodes.items()],
            "digest": self._graph_digest,
        }


def _edge_world_path(graph, edge_json, stride: int = 8):
    cells = edge_json["path"]
    pts = cells[::stride]
    if cells and (not pts or pts[-1] != cells[-1]):
        pts.append(cells[-1])
    cs = graph.cell_size
    ox, oy = graph.origin
    return [[round(ox + (c[0] + 0.5) * cs, 3), round(oy + (c[1] + 0.5) * cs, 3)]
            for c in pts]


def static_dir() -> Path:
    return Path(__file__).parent / "static"


def create_app(scenario: Scenario, rt_factor: float = 1.0) -> FastAPI:
    app = FastAPI(title="vorintent live service")
    session = LiveSession(scenario, rt_factor=rt_factor)
    app.state.session = session

    @app.on_event("startup")
    async def _start():
        app.state.tick_task = asyncio.create_task(session.run())

    @app.on_event("shutdown")
    async def _stop():
        app.state.tick_task.cancel()

    @app.get("/graph")
    async def graph():
        return JSONResponse(session.graph_payload())

    @app.get("/")
    async def index():
        index_html = static_dir() / "index.html"
        if index_html.exists():
            return FileResponse(index_html)
        return JSONResponse({"detail": "UI bundle not built; see frontend/"},
                            status_code=404)

    @app.get("/{asset}")
    async def assets(asset: str):
        path = static_dir() / asset
        if path.exists() and path.is_file():
            return FileResponse(path)
        return JSONResponse({"detail": "not found"}, status_code=404)

    @app.websocket("/ws")
    async def ws(socket: WebSocket):
        await socket.accept()
        receiver = asyncio.create_task(_receive_commands(socket, session))
        last_tick = -1
        last_sent = 0.0
        try:
            while True:
                await asyncio.wait(
                    [asyncio.create_task(session.frame_event.wait())],
                    timeout=FRAME_INTERVAL,
                )
                session.frame_event.clear()
                while session.errors:
                    await socket.send_text(json.dumps(session.errors.pop(0)))
                frame = session.frame
                now = asyncio.get_event_loop().time()
                if frame is not None and frame["tick"] > last_tick \
                        and now - last_sent >= FRAME_INTERVAL:
                    await socket.send_text(json.dumps(frame))
                    last_tick = frame["tick"]
                    last_sent = now
                if receiver.done():
                    break
        except (WebSocketDisconnect, RuntimeError):
            pass
        finally:
            receiver.cancel()

    return app


async def _receive_commands(socket: WebSocket, session: LiveSession) -> None:
    while True:
        try:
            raw = await socket.receive_text()
        except (WebSocketDisconnect, RuntimeError):
            return
        try:
            cmd = parse_command(raw)
        except MessageError as exc:
            await socket.send_text(json.dumps({"type": "error", "detail": str(exc)}))
            continue
        try:
            session.commands.put_nowait(cmd)
        except asyncio.QueueFull:
            await socket.send_text(json.dumps({"type": "error",
                                               "detail": "command queue full"}))
