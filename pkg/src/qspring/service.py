"""Live simulation service: one stepping loop, a websocket control/stream protocol.

Exactly one task mutates simulation state. Controls arrive over websockets,
are queued, and are applied atomically between steps; every applied control is
acknowledged with the frame index it takes effect before. Frames stream to all
connected clients as JSON with base64-packed positions (see PROTOCOL.md).

With no controls applied, the stepping loop calls the same functions with the
same inputs as the batch `simulate` command, so trajectories are bitwise
identical.
"""
from __future__ import annotations

import asyncio
import base64
import json
import logging
import threading
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .elastic import assemble_operators, prefactor
from .integrators import (
    explicit_euler_step,
    imex_step,
    make_force_backend,
    total_energy,
    verlet_step,
)
from .model import ChargeSet, ConfigError, DivergenceError, ExternalForcing, SimulationError
from .scene import Scene, charge_at_time, parse_scene_config

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1

CONTROL_KINDS = (
    "set_group_charge",
    "add_external_charge",
    "move_external_charge",
    "remove_external_charge",
    "set_timestep",
    "play",
    "pause",
    "reset",
    "load_scene",
)


def encode_positions(positions: np.ndarray) -> str:
    return base64.b64encode(np.asarray(positions, dtype="<f8").tobytes()).decode("ascii")


def decode_positions(text: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f8").copy()


class SimSession:
    """Scene plus live control state; stepping mirrors the batch rollout exactly."""

    def __init__(self, scene: Scene, throttle: int = 1, start_paused: bool = False):
        if throttle < 1:
            raise ConfigError("throttle must be >= 1")
        self.throttle = int(throttle)
        self.start_paused = bool(start_paused)
        self._load(scene)

    def _load(self, scene: Scene):
        self.scene = scene
        self.params = scene.params
        self.state = scene.state
        self.frame = 0
        self.playing = not getattr(self, "start_paused", False)
        self.diverged = False
        self.group_overrides: dict[str, float] = {}
        self.external: dict[str, tuple[np.ndarray, float]] = {
            f"scene{i}": (np.array(pos), float(q))
            for i, (pos, q) in enumerate(zip(scene.forcing.external_positions, scene.forcing.external_charges))
        }
        self._external_dirty = False
        self._backend = make_force_backend(scene.forces, self.params)
        self._operators = None
        self._prefac = None
        if scene.integrator == "imex":
            self._operators = assemble_operators(scene.topology)
            self._prefac = prefactor(scene.masses, self._operators, self.params.h, scene.pinned)

    # -- control application -------------------------------------------------

    def apply_control(self, payload: dict) -> dict:
        """Validate and apply one control; returns extra fields for the ack."""
        kind = payload.get("kind")
        if kind not in CONTROL_KINDS:
            raise ConfigError(f"unknown control kind {kind!r}")
        handler = getattr(self, f"_ctl_{kind}")
        result = handler(payload) or {}
        result["applied_before_frame"] = self.frame + 1
        return result

    def _ctl_set_group_charge(self, payload):
        group = payload.get("group")
        if group not in self.scene.vertex_groups:
            raise ConfigError(f"unknown vertex group {group!r}")
        value = payload.get("charge_uC")
        if not isinstance(value, (int, float)) or not np.isfinite(value):
            raise ConfigError("charge_uC must be a finite number")
        self.group_overrides[group] = float(value) * 1e-6

    def _ctl_add_external_charge(self, payload):
        if "id" in payload:
            cid = str(payload["id"])
        else:
            serial = len(self.external)
            while f"ext{serial}" in self.external:
                serial += 1
            cid = f"ext{serial}"
        pos = np.asarray(payload.get("position", ()), dtype=float).reshape(-1)
        if pos.size != 3 or not np.all(np.isfinite(pos)):
            raise ConfigError("external charge needs a finite [x, y, z] position")
        value = payload.get("charge_uC")
        if not isinstance(value, (int, float)) or not np.isfinite(value):
            raise ConfigError("charge_uC must be a finite number")
        self.external[cid] = (pos, float(value) * 1e-6)
        self._external_dirty = True
        return {"id": cid}

    def _ctl_move_external_charge(self, payload):
        cid = str(payload.get("id"))
        if cid not in self.external:
            raise ConfigError(f"unknown external charge {cid!r}")
        pos = np.asarray(payload.get("position", ()), dtype=float).reshape(-1)
        if pos.size != 3 or not np.all(np.isfinite(pos)):
            raise ConfigError("external charge needs a finite [x, y, z] position")
        self.external[cid] = (pos, self.external[cid][1])
        self._external_dirty = True

    def _ctl_remove_external_charge(self, payload):
        cid = str(payload.get("id"))
        if cid not in self.external:
            raise ConfigError(f"unknown external charge {cid!r}")
        del self.external[cid]
        self._external_dirty = True

    def _ctl_set_timestep(self, payload):
        h = payload.get("h")
        if not isinstance(h, (int, float)) or not (np.isfinite(h) and h > 0):
            raise ConfigError("h must be a positive number")
        self.params = self.params.replace(h=float(h))
        if self.scene.integrator == "imex":
            self._prefac = prefactor(self.scene.masses, self._operators, self.params.h, self.scene.pinned)

    def _ctl_play(self, payload):
        if self.diverged:
            raise ConfigError("simulation diverged; reset before resuming")
        self.playing = True

    def _ctl_pause(self, payload):
        self.playing = False

    def _ctl_reset(self, payload):
        self._load(self.scene)

    def _ctl_load_scene(self, payload):
        config = payload.get("config")
        if not isinstance(config, str) or not config.strip():
            raise ConfigError("load_scene needs inline TOML text in 'config'")
        self._load(parse_scene_config(config, name_hint="loaded"))

    # -- stepping -------------------------------------------------------------

    def effective_charges(self) -> ChargeSet:
        if self.scene.has_tracks():
            charges = charge_at_time(self.scene, self.state.time)
        else:
            charges = self.scene.charges
        if self.group_overrides:
            q = charges.charges.copy()
            for group, value in self.group_overrides.items():
                q[self.scene.vertex_groups[group]] = value
            charges = charges.with_charges(q)
        return charges

    def effective_forcing(self) -> ExternalForcing:
        if not self._external_dirty:
            return self.scene.forcing
        if self.external:
            positions = np.stack([pos for pos, _ in self.external.values()])
            values = np.array([q for _, q in self.external.values()])
        else:
            positions = np.zeros((0, 3))
            values = np.zeros(0)
        return self.scene.forcing.with_external_charges(positions, values)

    def step(self) -> None:
        """Advance one frame; raises DivergenceError and pauses on blow-up."""
        scene = self.scene
        charges = self.effective_charges()
        forcing = self.effective_forcing()
        try:
            if scene.integrator == "imex":
                self.state = imex_step(
                    self.state, self._operators, self._prefac, charges, forcing, self.params, self._backend
                )
            elif scene.integrator == "verlet":
                self.state = verlet_step(
                    self.state, scene.topology, scene.masses, charges, forcing,
                    self.params, self._backend, scene.pinned,
                )
            else:
                self.state = explicit_euler_step(
                    self.state, scene.topology, scene.masses, charges, forcing,
                    self.params, self._backend, scene.pinned,
                )
        except DivergenceError:
            self.playing = False
            self.diverged = True
            raise
        self.frame += 1

    # -- payloads -------------------------------------------------------------

    def scene_payload(self) -> dict:
        scene = self.scene
        pts = scene.state.points()
        return {
            "name": scene.name,
            "n": scene.vertex_count,
            "h": self.params.h,
            "integrator": scene.integrator,
            "edges": [[int(a), int(b)] for a, b in zip(scene.topology.i, scene.topology.j)],
            "groups": {
                name: {
                    "indices": idx.tolist(),
                    "charge_uC": float(self.effective_charges().charges[idx[0]] * 1e6) if idx.size else 0.0,
                }
                for name, idx in scene.vertex_groups.items()
            },
            "pinned": scene.pinned.tolist(),
            "external_charges": [
                {"id": cid, "position": pos.tolist(), "charge_uC": q * 1e6}
                for cid, (pos, q) in self.external.items()
            ],
            "bounds": {"lo": pts.min(axis=0).tolist(), "hi": pts.max(axis=0).tolist()},
            "throttle": self.throttle,
        }

    def frame_payload(self) -> dict:
        charges = self.effective_charges()
        energy = total_energy(
            self.state, self.scene.topology, self.scene.masses, charges,
            self.effective_forcing(), self.params.gravity, self.params.softening_epsilon,
        )
        group_charges = {
            name: float(charges.charges[idx[0]] * 1e6) if idx.size else 0.0
            for name, idx in self.scene.vertex_groups.items()
        }
        return {
            "type": "frame",
            "frame": self.frame,
            "time": self.state.time,
            "n": self.state.vertex_count,
            "h": self.params.h,
            "positions": encode_positions(self.state.positions),
            "group_charges": group_charges,
            "energy": {
                "kinetic": energy.kinetic,
                "elastic": energy.elastic,
                "coulomb": energy.coulomb,
                "external_potential": energy.external_potential,
                "total": energy.total,
            },
            "playing": self.playing,
        }


@dataclass
class _Client:
    socket: object


class SimServer:
    """Owns the session, the control queue, and the broadcast set."""

    def __init__(self, scene: Scene, throttle: int = 1, realtime: bool = False,
                 start_paused: bool = False):
        self.session = SimSession(scene, throttle, start_paused)
        self.realtime = realtime
        self.clients: set = set()
        self.queue: asyncio.Queue = asyncio.Queue()
        self._stop = asyncio.Event()

    async def handler(self, websocket):
        self.clients.add(websocket)
        try:
            await websocket.send(json.dumps({
                "type": "hello",
                "protocol": PROTOCOL_VERSION,
                "scene": self.session.scene_payload(),
            }))
            await websocket.send(json.dumps(self.session.frame_payload()))
            async for raw in websocket:
                try:
                    payload = json.loads(raw)
                except json.JSONDecodeError:
                    await websocket.send(json.dumps({"type": "error", "message": "malformed JSON", "seq": None}))
                    continue
                if payload.get("type") != "control":
                    await websocket.send(json.dumps({
                        "type": "error", "message": "expected a control message", "seq": payload.get("seq"),
                    }))
                    continue
                await self.queue.put((websocket, payload))
        finally:
            self.clients.discard(websocket)

    async def _send_safe(self, websocket, text: str):
        try:
            await websocket.send(text)
        except Exception:
            self.clients.discard(websocket)

    async def broadcast(self, message: dict):
        if not self.clients:
            return
        text = json.dumps(message)
        await asyncio.gather(*(self._send_safe(ws, text) for ws in list(self.clients)))

    async def _apply_queued(self):
        while not self.queue.empty():
            websocket, payload = self.queue.get_nowait()
            seq = payload.get("seq")
            try:
                extra = self.session.apply_control(payload)
            except SimulationError as exc:
                await self._send_safe(websocket, json.dumps({"type": "error", "message": str(exc), "seq": seq}))
                continue
            ack = {"type": "ack", "seq": seq}
            ack.update(extra)
            await self._send_safe(websocket, json.dumps(ack))
            if payload.get("kind") in ("reset", "load_scene"):
                await self.broadcast({"type": "scene", "scene": self.session.scene_payload()})
                await self.broadcast(self.session.frame_payload())

    async def run(self):
        session = self.session
        while not self._stop.is_set():
            await self._apply_queued()
            if not session.playing:
                try:
                    await asyncio.wait_for(self._wait_for_queue(), timeout=0.05)
                except asyncio.TimeoutError:
                    pass
                continue
            try:
                session.step()
            except DivergenceError as exc:
                await self.broadcast({
                    "type": "error",
                    "message": f"diverged at frame {session.frame + 1}; paused at last finite frame",
                    "seq": None,
                })
                continue
            if session.frame % session.throttle == 0:
                await self.broadcast(session.frame_payload())
            if self.realtime:
                await asyncio.sleep(session.params.h)
            else:
                await asyncio.sleep(0)

    async def _wait_for_queue(self):
        while self.queue.empty():
            await asyncio.sleep(0.005)

    def stop(self):
        self._stop.set()


async def serve(scene: Scene, host: str = "127.0.0.1", port: int = 0, throttle: int = 1,
                realtime: bool = False, ready: Optional[asyncio.Future] = None,
                start_paused: bool = False):
    """Run the websocket endpoint and the simulation loop until cancelled."""
    from websockets.asyncio.server import serve as ws_serve

    server = SimServer(scene, throttle=throttle, realtime=realtime, start_paused=start_paused)
    async with ws_serve(server.handler, host, port) as ws_server:
        bound = ws_server.sockets[0].getsockname()[1] if ws_server.sockets else port
        log.info("listening on ws://%s:%d/sim", host, bound)
        print(f"listening on ws://{host}:{bound}/sim", flush=True)
        if ready is not None and not ready.done():
            ready.set_result(bound)
        await server.run()


def serve_forever(scene: Scene, host: str = "127.0.0.1", port: int = 8787,
                  throttle: int = 1, realtime: bool = True, start_paused: bool = False):
    try:
        asyncio.run(serve(scene, host=host, port=port, throttle=throttle,
                          realtime=realtime, start_paused=start_paused))
    except KeyboardInterrupt:
        pass


class BackgroundServer:
    """Run the service on a daemon thread; used by tests and scripted clients."""

    def __init__(self, scene: Scene, throttle: int = 1, realtime: bool = False,
                 start_paused: bool = False):
        self.scene = scene
        self.throttle = throttle
        self.realtime = realtime
        self.start_paused = start_paused
        self.port: Optional[int] = None
        self._loop: Optional[asyncio.AbstractEventLoop] = None
        self._thread: Optional[threading.Thread] = None
        self._started = threading.Event()

    def __enter__(self) -> "BackgroundServer":
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()
        if not self._started.wait(timeout=15):
            raise RuntimeError("service did not start in time")
        return self

    def _run(self):
        loop = asyncio.new_event_loop()
        asyncio.set_event_loop(loop)
        self._loop = loop
        ready = loop.create_future()

        async def main():
            task = asyncio.ensure_future(
                serve(self.scene, port=0, throttle=self.throttle, realtime=self.realtime,
                      ready=ready, start_paused=self.start_paused)
            )
            self.port = await ready
            self._started.set()
            try:
                await task
            except asyncio.CancelledError:
                pass

        try:
            loop.run_until_complete(main())
        finally:
            loop.close()

    def __exit__(self, *exc):
        if self._loop is not None:
            self._loop.call_soon_threadsafe(self._cancel_all)
        if self._thread is not None:
            self._thread.join(timeout=10)

    def _cancel_all(self):
        for task in asyncio.all_tasks(self._loop):
            task.cancel()

    @property
    def url(self) -> str:
        return f"ws://127.0.0.1:{self.port}/sim"
