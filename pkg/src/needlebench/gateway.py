"""WebSocket service for live trials: telemetry out, manual commands in.

One session per connection.  Control traffic (hello, acks, errors, trial
lifecycle) travels as JSON text messages; each rendered frame goes out as
one binary message (8-bit grayscale behind a 20-byte header) tagged with
the seq of the telemetry snapshot that described it.  The trial itself is
the ordinary virtual-clock pipeline running in a worker thread, paced
against the wall clock by sleeping inside the frame telemetry hook; the
socket side polls a latest-wins snapshot, so a slow client skips frames
and the pipeline never waits for the network.  docs/protocol.md freezes
the wire format (v1).
"""

from __future__ import annotations

import asyncio
import contextlib
import itertools
import json
import math
import struct
import threading
import time
from collections import deque
from dataclasses import replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from .pipeline import (
    PIPELINES,
    PipelineConfig,
    VirtualScheduler,
    read_trial_record,
    replay_policy,
    run_trial,
)
from .simulator import (
    THETA_MAX_DEG,
    THETA_MIN_DEG,
    V_MAX_MM_S,
    VP_MAX_MM_S,
    Action,
    InsertionScenario,
    make_scenario,
)
from .tensor import ConfigError

PROTOCOL_VERSION = 1
# binary frame header: seq u32, frame_id u32, sim_time f64, height u16, width u16
FRAME_HEADER = struct.Struct("<IIdHH")

LIMITS = {
    "v_n_mm_s": [0.0, V_MAX_MM_S],
    "theta_n_deg": [THETA_MIN_DEG, THETA_MAX_DEG],
    "v_p_mm_s": [-VP_MAX_MM_S, VP_MAX_MM_S],
}

MANUAL_COMMANDS = ("set_v_n", "set_theta_n", "jog_probe", "stop")


def _num(value) -> float:
    """Finite float or ValueError (bools are not numbers here)."""
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValueError(f"expected a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise ValueError("value must be finite")
    return value


class ManualBridge:
    """Zero-order hold turning the command stream into the policy stream.

    Starts at Action(v_n=0, stop=False) so an idle operator inserts
    nothing; each setter clamps to actuator limits and returns the
    applied value for the ack.
    """

    def __init__(self, theta0_deg: float):
        self._lock = threading.Lock()
        self._action = Action(theta_n_deg=theta0_deg, v_n_mm_s=0.0)

    def __call__(self, pi) -> Action:  # policy_fn signature
        with self._lock:
            return self._action

    def set_v_n(self, value: float) -> float:
        applied = min(max(_num(value), 0.0), V_MAX_MM_S)
        with self._lock:
            self._action = replace(self._action, v_n_mm_s=applied)
        return applied

    def set_theta_n(self, value: float) -> float:
        applied = min(max(_num(value), THETA_MIN_DEG), THETA_MAX_DEG)
        with self._lock:
            self._action = replace(self._action, theta_n_deg=applied)
        return applied

    def jog_probe(self, value) -> list[float]:
        if not isinstance(value, (list, tuple)) or len(value) != 3:
            raise ValueError("jog_probe expects a 3-vector of mm/s")
        applied = [min(max(_num(v), -VP_MAX_MM_S), VP_MAX_MM_S) for v in value]
        with self._lock:
            self._action = replace(self._action, v_p_mm_s=tuple(applied))
        return applied

    def stop(self) -> bool:
        with self._lock:
            self._action = replace(self._action, stop=True)
        return True


class LiveTrial:
    """One running trial: pipeline worker thread + latest-wins telemetry."""

    def __init__(self, trial_id: int, scenario: InsertionScenario,
                 cfg: PipelineConfig, control: str, policy_name: Optional[str],
                 policy_fn: Callable, tracker_factory: Callable,
                 record_path: Path, extra_meta: dict, speed: float,
                 debug_gt: bool, initial_seq: int,
                 on_done: Callable[["LiveTrial"], None]):
        self.trial_id = trial_id
        self.scenario = scenario
        self.cfg = cfg
        self.control = control
        self.policy_name = policy_name
        self.record_path = record_path
        self.bridge = policy_fn if isinstance(policy_fn, ManualBridge) else None
        self.abort = threading.Event()
        self.done = False
        self.result = None
        self.error: Optional[str] = None
        self.sched = VirtualScheduler()
        self._speed = speed
        self._debug_gt = debug_gt
        self._on_done = on_done

        self._lock = threading.Lock()
        self.version = initial_seq
        self._frame: Optional[dict] = None
        self._track: Optional[dict] = None
        self._action: Optional[dict] = None
        self._wall0 = 0.0
        self._thread = threading.Thread(
            target=self._run,
            args=(policy_fn, tracker_factory, extra_meta),
            name=f"trial-{trial_id}", daemon=True)

    # -- worker side ---------------------------------------------------------

    def start(self) -> None:
        self._wall0 = time.monotonic()
        self._thread.start()

    def _run(self, policy_fn, tracker_factory, extra_meta) -> None:
        try:
            self.result = run_trial(
                self.scenario, tracker_factory, policy_fn, self.cfg,
                telemetry=self._on_event, record_path=self.record_path,
                scheduler=self.sched, external_abort=self.abort.is_set,
                record_meta=extra_meta)
        except Exception as e:  # pragma: no cover - defensive
            self.error = f"{type(e).__name__}: {e}"
        finally:
            self.done = True
            self._on_done(self)

    def _pace(self, sim_time: float) -> None:
        if self._speed <= 0:
            return
        target = self._wall0 + sim_time / self._speed
        while not self.abort.is_set():
            delay = target - time.monotonic()
            if delay <= 0:
                return
            time.sleep(min(delay, 0.05))

    def _on_event(self, kind: str, payload: dict) -> None:
        if kind == "frame":
            frame = payload["frame"]
            off = np.array([frame.probe_offset_px, 0.0])
            target = np.asarray(self.scenario.phantom.target_px) - off
            entry = np.asarray(self.scenario.entry_px) - off
            pixels = (np.clip(frame.image, 0.0, 1.0) * 255).round()
            info = {
                "frame_id": int(frame.frame_id),
                "sim_time": float(frame.sim_time),
                "h": int(frame.image.shape[0]), "w": int(frame.image.shape[1]),
                "pixels": pixels.astype(np.uint8).tobytes(),
                "target_px": [float(target[0]), float(target[1])],
                "entry_px": [float(entry[0]), float(entry[1])],
            }
            if self._debug_gt:
                info["gt_box"] = [float(x) for x in frame.gt_box]
                info["gt_visibility"] = float(frame.visibility)
            with self._lock:
                self._frame = info
                self.version += 1
            self._pace(frame.sim_time)
        elif kind == "track":
            st = payload["state"]
            info = {"box": [float(x) for x in st.box],
                    "visibility": float(st.confidence),
                    "raw_confidence": float(st.raw_confidence),
                    "sim_time": float(payload["sim_time"])}
            with self._lock:
                self._track = info
                self.version += 1
        elif kind == "action":
            a: Action = payload["action"]
            info = {"v_n": float(a.v_n_mm_s), "theta_n": float(a.theta_n_deg),
                    "v_p": [float(v) for v in a.v_p_mm_s],
                    "stop": bool(a.stop),
                    "sim_time": float(payload["sim_time"])}
            with self._lock:
                self._action = info
                self.version += 1

    # -- socket side ---------------------------------------------------------

    def now(self) -> float:
        """Current virtual time (the worker advances it)."""
        return float(self.sched.now)

    def snapshot(self, after: int) -> Optional[dict]:
        """Latest telemetry newer than `after`, or None."""
        with self._lock:
            if self.version <= after or self._frame is None:
                return None
            frame, track, action = self._frame, self._track, self._action
            seq = self.version
        msg = {
            "type": "telemetry", "seq": seq, "trial_id": self.trial_id,
            "status": "running" if not self.done else "ended",
            "sim_time": frame["sim_time"], "frame_id": frame["frame_id"],
            "target_px": frame["target_px"], "entry_px": frame["entry_px"],
            "box": track["box"] if track else None,
            "visibility": track["visibility"] if track else None,
            "raw_confidence": track["raw_confidence"] if track else None,
            "track_sim_time": track["sim_time"] if track else None,
            "v_n": action["v_n"] if action else 0.0,
            "theta_n": action["theta_n"] if action else float(self.scenario.theta0_deg),
            "v_p": action["v_p"] if action else [0.0, 0.0, 0.0],
            "stop": action["stop"] if action else False,
            "action_sim_time": action["sim_time"] if action else None,
        }
        if self._debug_gt:
            msg["gt_box"] = frame.get("gt_box")
            msg["gt_visibility"] = frame.get("gt_visibility")
        return {"seq": seq, "telemetry": msg, "frame_id": frame["frame_id"],
                "sim_time": frame["sim_time"], "h": frame["h"], "w": frame["w"],
                "pixels": frame["pixels"]}


class Session:
    """One client connection: command dispatch and ordered outbox."""

    def __init__(self, gw: "_Gateway", session_id: str):
        self.gw = gw
        self.id = session_id
        self.outbox: deque[dict] = deque()
        self.trial: Optional[LiveTrial] = None

    # -- message helpers -----------------------------------------------------

    def _seq(self) -> int:
        return self.trial.version if self.trial is not None else 0

    def _push(self, msg: dict) -> None:
        msg["_after_seq"] = self._seq()
        self.outbox.append(msg)

    def _error(self, message: str, cmd: Optional[str] = None) -> None:
        msg = {"type": "error", "message": message}
        if cmd is not None:
            msg["cmd"] = cmd
        self._push(msg)

    def _ack(self, cmd: str, requested, applied) -> None:
        self._push({"type": "ack", "cmd": cmd, "requested": requested,
                    "applied": applied,
                    "trial_id": self.trial.trial_id,
                    "sim_time": self.trial.now()})

    def hello(self) -> dict:
        return {"type": "hello", "protocol": PROTOCOL_VERSION,
                "session": self.id, "limits": LIMITS,
                "debug_gt": self.gw.debug_gt, "speed": self.gw.speed,
                "frame_stride": self.gw.frame_stride}

    def active(self) -> bool:
        return self.trial is not None and not self.trial.done

    @property
    def mode(self) -> Optional[str]:
        return self.trial.control if self.active() else None

    def snapshot(self, after: int) -> Optional[dict]:
        return self.trial.snapshot(after) if self.trial is not None else None

    # -- command dispatch ----------------------------------------------------

    def handle_text(self, text: str) -> None:
        try:
            msg = json.loads(text)
        except json.JSONDecodeError:
            return self._error("invalid JSON")
        if not isinstance(msg, dict) or not isinstance(msg.get("type"), str):
            return self._error("message must be an object with a string 'type'")
        kind = msg["type"]
        try:
            if kind == "start_trial":
                self._start_trial(msg)
            elif kind in MANUAL_COMMANDS:
                self._manual(kind, msg)
            elif kind == "abort":
                self._abort()
            else:
                self._error(f"unknown command type {kind!r}", kind)
        except (ConfigError, ValueError, TypeError) as e:
            self._error(str(e), kind)

    def _manual(self, cmd: str, msg: dict) -> None:
        if not self.active():
            return self._error("no active trial", cmd)
        trial = self.trial
        if trial.control != "MANUAL":
            return self._error(
                f"{cmd} rejected: session is in {trial.control} mode", cmd)
        bridge = trial.bridge
        if cmd == "set_v_n":
            applied = bridge.set_v_n(msg.get("value"))
            self._ack(cmd, msg.get("value"), applied)
        elif cmd == "set_theta_n":
            applied = bridge.set_theta_n(msg.get("value"))
            self._ack(cmd, msg.get("value"), applied)
        elif cmd == "jog_probe":
            applied = bridge.jog_probe(msg.get("value"))
            self._ack(cmd, msg.get("value"), applied)
        else:  # stop
            bridge.stop()
            self._ack(cmd, True, True)

    def _abort(self) -> None:
        if not self.active():
            return self._error("no active trial", "abort")
        self.trial.abort.set()
        self._ack("abort", True, True)

    def _start_trial(self, msg: dict) -> None:
        if self.active():
            return self._error("trial already active", "start_trial")
        control = msg.get("control", "AUTO")
        if control not in ("AUTO", "MANUAL"):
            raise ConfigError("control must be AUTO or MANUAL")
        mode = msg.get("mode", "IPS")
        pipeline = msg.get("pipeline", "async")
        if pipeline not in PIPELINES:
            raise ConfigError(f"pipeline must be one of {PIPELINES}")
        occlusion = msg.get("occlusion", "light")
        trial_id = next(self.gw.trial_counter)
        seed = msg.get("seed", 100 + trial_id)
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise ConfigError("seed must be an integer")

        policy_name = msg.get("policy")
        if control == "MANUAL":
            if policy_name is not None:
                raise ConfigError("policy is not accepted in MANUAL mode")
        else:
            policy_name = policy_name or "uncertainty"
            if policy_name not in self.gw.policies:
                raise ConfigError(
                    f"unknown policy {policy_name!r}; available: "
                    f"{sorted(self.gw.policies)}")

        scenario = make_scenario(seed, mode, occlusion=occlusion,
                                 name=f"live{trial_id:03d}")
        target = msg.get("target_px")
        if target is not None:
            if not isinstance(target, (list, tuple)) or len(target) != 2:
                raise ConfigError("target_px must be [x, y] in image pixels")
            tx, ty = _num(target[0]), _num(target[1])
            size = scenario.phantom.size
            if not (0 <= tx < size and 0 <= ty < size):
                raise ConfigError(f"target_px outside the {size}px image")
            scenario = replace(scenario, phantom=replace(
                scenario.phantom, target_px=(tx, ty)))
            target = [tx, ty]

        cfg = replace(self.gw.base_cfg, pipeline=pipeline)
        if "max_duration_s" in msg:
            dur = _num(msg["max_duration_s"])
            if not 0 < dur <= 600:
                raise ConfigError("max_duration_s must be in (0, 600]")
            cfg = replace(cfg, max_duration_s=dur)

        policy_fn = (ManualBridge(scenario.theta0_deg) if control == "MANUAL"
                     else self.gw.policies[policy_name])
        record = self.gw.record_dir / f"trial_{trial_id:03d}.jsonl"
        extra = {"trial_id": trial_id, "control": control,
                 "policy": policy_name,
                 "scenario_args": {"seed": seed, "mode": mode,
                                   "occlusion": occlusion,
                                   "target_px": target}}
        initial_seq = self.trial.version if self.trial is not None else 0
        trial = LiveTrial(trial_id, scenario, cfg, control, policy_name,
                          policy_fn, self.gw.tracker_factory, record, extra,
                          speed=self.gw.speed, debug_gt=self.gw.debug_gt,
                          initial_seq=initial_seq,
                          on_done=self._trial_finished)
        self.trial = trial
        self._push({
            "type": "trial_started", "trial_id": trial_id,
            "control": control, "mode": mode, "occlusion": occlusion,
            "seed": seed, "pipeline": pipeline, "policy": policy_name,
            "mm_per_px": scenario.phantom.mm_per_px,
            "image_size": [scenario.phantom.size, scenario.phantom.size],
            "target_px": [float(x) for x in scenario.phantom.target_px],
            "entry_px": [float(x) for x in scenario.entry_px],
            "theta0_deg": float(scenario.theta0_deg),
            "success_radius_mm": cfg.success_radius_mm,
            "max_duration_s": cfg.max_duration_s,
            "record": str(record),
        })
        trial.start()

    def _trial_finished(self, trial: LiveTrial) -> None:
        # runs on the trial thread; deque.append is atomic
        if trial.error is not None:
            self.outbox.append({"type": "error",
                                "message": f"trial crashed: {trial.error}",
                                "_after_seq": trial.version})
            return
        self.outbox.append({"type": "trial_end", "trial_id": trial.trial_id,
                            **trial.result.to_meta(),
                            "record": str(trial.record_path),
                            "_after_seq": trial.version})

    def shutdown(self) -> None:
        """Abort any running trial (client went away); record says aborted."""
        if self.active():
            self.trial.abort.set()
            self.trial._thread.join(timeout=10.0)


class _Gateway:
    def __init__(self, tracker_factory, policies, record_dir, base_cfg,
                 frame_stride, debug_gt, speed):
        self.tracker_factory = tracker_factory
        self.policies = dict(policies)
        self.record_dir = Path(record_dir)
        self.record_dir.mkdir(parents=True, exist_ok=True)
        self.base_cfg = base_cfg if base_cfg is not None else PipelineConfig()
        self.frame_stride = max(1, int(frame_stride))
        self.debug_gt = bool(debug_gt)
        self.speed = float(speed)
        self.trial_counter = itertools.count(1)
        self._session_counter = itertools.count(1)
        self.sessions: set[Session] = set()

    def new_session(self) -> Session:
        s = Session(self, f"s{next(self._session_counter):03d}")
        self.sessions.add(s)
        return s

    def drop(self, session: Session) -> None:
        self.sessions.discard(session)

    def status(self) -> dict:
        return {"protocol": PROTOCOL_VERSION,
                "sessions": len(self.sessions),
                "active_trials": sum(1 for s in self.sessions if s.active())}


async def _flush(ws: WebSocket, session: Session, sent: int,
                 last_frame: int, stride: int) -> tuple[int, int]:
    snap = session.snapshot(sent)
    if snap is None:
        return sent, last_frame
    await ws.send_json(snap["telemetry"])
    fid = snap["frame_id"]
    if fid != last_frame and fid % stride == 0:
        header = FRAME_HEADER.pack(snap["seq"], fid, snap["sim_time"],
                                   snap["h"], snap["w"])
        await ws.send_bytes(header + snap["pixels"])
        last_frame = fid
    return snap["seq"], last_frame


async def _pump(ws: WebSocket, session: Session, stride: int) -> None:
    """Single writer: drains the outbox, then ships the newest telemetry.

    Control messages tagged with an _after_seq flush telemetry up to that
    seq first, so e.g. trial_end never overtakes the final frame.
    """
    sent, last_frame = 0, -1
    try:
        while True:
            while session.outbox:
                msg = dict(session.outbox.popleft())
                after = msg.pop("_after_seq", 0)
                if after > sent:
                    sent, last_frame = await _flush(ws, session, sent,
                                                    last_frame, stride)
                await ws.send_json(msg)
            sent, last_frame = await _flush(ws, session, sent, last_frame,
                                            stride)
            await asyncio.sleep(0.004)
    except (WebSocketDisconnect, RuntimeError):
        return  # client went away; the receive loop handles cleanup


def build_app(tracker_factory: Callable, policies: dict,
              record_dir: str | Path, base_cfg: Optional[PipelineConfig] = None,
              frame_stride: int = 1, debug_gt: bool = False,
              speed: float = 1.0, static_dir: Optional[str] = None) -> FastAPI:
    """Assemble the service; `policies` maps name -> policy_fn for AUTO."""
    gw = _Gateway(tracker_factory, policies, record_dir, base_cfg,
                  frame_stride, debug_gt, speed)
    app = FastAPI(title="needlebench gateway")
    app.state.gateway = gw

    @app.get("/status")
    def status() -> dict:
        return gw.status()

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket) -> None:
        await ws.accept()
        session = gw.new_session()
        await ws.send_json(session.hello())
        pump = asyncio.create_task(_pump(ws, session, gw.frame_stride))
        try:
            while True:
                msg = await ws.receive()
                if msg["type"] == "websocket.disconnect":
                    break
                if msg.get("text") is not None:
                    session.handle_text(msg["text"])
                elif msg.get("bytes") is not None:
                    session._error("binary messages are not part of the protocol")
        except WebSocketDisconnect:
            pass
        finally:
            pump.cancel()
            with contextlib.suppress(asyncio.CancelledError):
                await pump
            session.shutdown()
            gw.drop(session)

    if static_dir:
        from starlette.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")
    return app


def serve(run: str | Path, cfg: dict, host: str, port: int) -> None:
    """Load run artifacts and serve live trials over WebSocket."""
    import uvicorn

    from .cli import _policy_net, _tracker_bundle, _tracker_factory
    from .config import build
    from .policy import constant_velocity_action, expert_action

    run = Path(run)
    gw_cfg = cfg["gateway"]
    tracker_factory = _tracker_factory(_tracker_bundle(run))
    policies = {"uncertainty": expert_action,
                "constant": constant_velocity_action}
    if (run / "policy.json").exists():
        policies["learned"] = _policy_net(run).act
    app = build_app(tracker_factory, policies, record_dir=run / "gateway",
                    base_cfg=build(cfg, "pipeline"),
                    frame_stride=int(gw_cfg["frame_stride"]),
                    debug_gt=bool(gw_cfg["debug_gt"]),
                    speed=float(gw_cfg["speed"]),
                    static_dir=str(gw_cfg["static"]) or None)
    print(f"serving on ws://{host}:{port}/ws (records in {run / 'gateway'})")
    uvicorn.run(app, host=host, port=int(port), log_level="warning")


def replay_record(path: str | Path, tracker_factory: Callable):
    """Re-run a recorded trial by forcing its logged actions.

    Needs the scenario provenance that live/CLI trials embed in the meta
    line; with the same scenario, config, and tracker the control branch
    wakes at the same virtual times, so the trajectory reproduces exactly.
    """
    rec = read_trial_record(path)
    meta = rec["meta"]
    args = meta.get("scenario_args")
    if not args:
        raise ConfigError(f"{path} has no scenario provenance to replay from")
    scenario = make_scenario(args["seed"], args["mode"],
                             occlusion=args["occlusion"],
                             name=meta["scenario"])
    if args.get("target_px") is not None:
        scenario = replace(scenario, phantom=replace(
            scenario.phantom, target_px=tuple(args["target_px"])))
    cfg = PipelineConfig(**meta["pipeline_cfg"])
    return run_trial(scenario, tracker_factory, replay_policy(rec["ticks"]),
                     cfg)
