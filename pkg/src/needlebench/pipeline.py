"""Asynchronous perception/control pipeline on a deterministic virtual clock.

Three activities run at independent rates and exchange data through
single-slot latest-wins mailboxes: the simulator ticks at a fixed frame
rate, the tracking branch wakes on its own period and consumes the newest
frame, and the control branch wakes on its own period and consumes the
newest tracking state.  Compute and transport delays are injected by
scheduling each publish at wake time + configured latency, so a slow
control branch can never stall tracking (the async claim), while the sync
baseline chains frame -> track -> act into one loop whose reaction time is
the summed latency.

Everything runs on a discrete-event scheduler over a virtual clock:
trials are bit-reproducible, and a 60 s trial takes however long the
inference math takes, not 60 wall seconds.  A serving layer may pace
`run_until` against the wall clock to drive the same pipeline live.
"""

from __future__ import annotations

import heapq
import json
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .policy import PolicyInput
from .simulator import Action, Frame, InsertionScenario, Simulator
from .tensor import ConfigError
from .tracking import OnlineTracker, TrackState

PIPELINES = ("async", "sync")


class LatestValueSlot:
    """Single-item mailbox; writers replace, readers take the newest.

    Reads never block writes.  An unread value that gets overwritten
    counts as dropped (the slow-consumer signal).
    """

    def __init__(self, name: str):
        self.name = name
        self._lock = threading.Lock()
        self._item = None
        self._seq = 0
        self._read_since_publish = True
        self.published = 0
        self.dropped = 0

    def publish(self, item) -> None:
        with self._lock:
            if not self._read_since_publish:
                self.dropped += 1
            self._item = item
            self._seq += 1
            self.published += 1
            self._read_since_publish = False

    def latest(self) -> Optional[tuple[int, object]]:
        """Newest (seq, item) or None; marks the slot as read."""
        with self._lock:
            if self._seq == 0:
                return None
            self._read_since_publish = True
            return self._seq, self._item

    def take_new(self, after_seq: int) -> Optional[tuple[int, object]]:
        """Newest (seq, item) only if newer than after_seq."""
        with self._lock:
            if self._seq == 0 or self._seq <= after_seq:
                return None
            self._read_since_publish = True
            return self._seq, self._item


class VirtualScheduler:
    """Discrete-event loop: (time, priority, insertion order) heap."""

    def __init__(self):
        self._heap: list = []
        self._counter = 0
        self.now = 0.0
        self.stopped = False

    def call_at(self, t: float, priority: int, fn: Callable[[], None]) -> None:
        if t < self.now - 1e-12:
            raise ConfigError(f"cannot schedule at {t} before now {self.now}")
        self._counter += 1
        heapq.heappush(self._heap, (t, priority, self._counter, fn))

    def run_until(self, t_end: float) -> None:
        while self._heap and not self.stopped:
            t, _prio, _c, fn = self._heap[0]
            if t > t_end + 1e-12:
                break
            heapq.heappop(self._heap)
            self.now = t
            fn()
        if self.now < t_end and not self.stopped:
            self.now = t_end


@dataclass
class BranchStats:
    """Wake-to-wake periods and input staleness for one activity."""

    name: str
    periods: list[float] = field(default_factory=list)
    staleness: list[float] = field(default_factory=list)
    processed: int = 0

    def summary(self) -> dict:
        out = {"name": self.name, "processed": self.processed}
        for key, xs in (("period", self.periods), ("staleness", self.staleness)):
            if xs:
                arr = np.asarray(xs)
                out[f"{key}_mean_s"] = float(arr.mean())
                out[f"{key}_p95_s"] = float(np.percentile(arr, 95))
                out[f"{key}_max_s"] = float(arr.max())
        return out


@dataclass(frozen=True)
class PipelineConfig:
    pipeline: str = "async"
    sim_hz: float = 25.0
    tracking_period_s: float = 0.040
    tracking_latency_s: float = 0.030
    control_period_s: float = 0.100
    control_latency_s: float = 0.100
    max_duration_s: float = 60.0
    success_radius_mm: float = 5.0
    divergence_conf: float = 0.10
    divergence_frames: int = 15

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"pipeline must be one of {PIPELINES}")
        for name in ("sim_hz", "tracking_period_s", "control_period_s",
                     "max_duration_s"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("tracking_latency_s", "control_latency_s"):
            if getattr(self, name) < 0:  # zero = idealized instant stage
                raise ConfigError(f"{name} must be non-negative")


@dataclass
class TrialResult:
    success: bool
    failure_reason: Optional[str]  # missed_target | loss_of_visualization |
    # out_of_bounds | timeout | aborted
    duration_s: float
    final_dist_mm: float
    stop_commanded: bool
    events: list[str]
    branch_stats: dict[str, dict]
    slots: dict[str, dict]
    records: list[dict]

    def to_meta(self) -> dict:
        return {"success": self.success, "failure_reason": self.failure_reason,
                "duration_s": self.duration_s,
                "final_dist_mm": self.final_dist_mm,
                "stop_commanded": self.stop_commanded, "events": self.events}


@dataclass
class _TrackMsg:
    state: TrackState
    made_at: float  # wake time of the tracking pass
    available_at: float  # made_at + latency


def run_trial(scenario: InsertionScenario,
              tracker_factory: Callable[[], OnlineTracker],
              policy_fn: Callable[[PolicyInput], Action],
              cfg: PipelineConfig = PipelineConfig(),
              telemetry: Optional[Callable[[str, dict], None]] = None,
              record_path: Optional[str | Path] = None,
              scheduler: Optional[VirtualScheduler] = None,
              external_pause: Optional[Callable[[], bool]] = None,
              external_abort: Optional[Callable[[], bool]] = None,
              record_meta: Optional[dict] = None) -> TrialResult:
    """Run one insertion trial to stop/failure/timeout on the virtual clock.

    The tracker template initializes from the instruction box on frame 0.
    `policy_fn` sees only tracker output plus actuator odometry (the
    instruction target mapped through the probe offset).  Telemetry fires
    as ("frame"|"track"|"action"|"result", payload) for live serving.
    `external_abort` is polled every simulator tick; once true the trial
    finishes as failure_reason "aborted".  `record_meta` is merged into the
    record's meta line (scenario provenance for replay).
    """
    sim = Simulator(scenario, dt=1.0 / cfg.sim_hz)
    tracker = tracker_factory()
    sched = scheduler if scheduler is not None else VirtualScheduler()
    t_start = sched.now

    frame_slot = LatestValueSlot("frames")
    track_slot = LatestValueSlot("track")
    action_slot = LatestValueSlot("action")

    stats = {"sim": BranchStats("sim"), "tracking": BranchStats("tracking"),
             "control": BranchStats("control")}
    records: list[dict] = []
    state = {
        "done": False, "success": False, "reason": None, "end_t": None,
        "stop_commanded": False, "low_conf_run": 0,
        "last_frame_seq": 0, "last_track_seq": 0,
        "last_sim_wake": None, "last_track_wake": None,
        "last_ctrl_wake": None, "final_dist": None,
    }

    f0 = sim.render()
    st0 = tracker.start(f0.image, f0.gt_box, frame_id=0, timestamp=0.0)
    frame_slot.publish(f0)
    track_slot.publish(_TrackMsg(state=st0, made_at=0.0, available_at=0.0))
    if telemetry:
        telemetry("frame", {"frame": f0, "sim_time": 0.0})
        telemetry("track", {"state": st0, "sim_time": 0.0})

    def finish(success: bool, reason: Optional[str]) -> None:
        if state["done"]:
            return
        state["done"] = True
        state["success"] = success
        state["reason"] = reason
        state["end_t"] = sched.now
        state["final_dist"] = sim.tip_to_target_mm()
        sched.stopped = True

    def sim_tick() -> None:
        if state["done"]:
            return
        if external_abort is not None and external_abort():
            finish(False, "aborted")
            return
        t = sched.now
        if state["last_sim_wake"] is not None:
            stats["sim"].periods.append(t - state["last_sim_wake"])
        state["last_sim_wake"] = t
        got = action_slot.latest()
        action = got[1] if got else Action(theta_n_deg=scenario.theta0_deg,
                                           v_n_mm_s=0.0)
        if external_pause is not None and external_pause():
            action = Action(theta_n_deg=action.theta_n_deg, v_n_mm_s=0.0)
        first_stop = action.stop and not state["stop_commanded"]
        if action.stop:
            state["stop_commanded"] = True
        frame = sim.step(action)
        stats["sim"].processed += 1
        frame_slot.publish(frame)
        if telemetry:
            telemetry("frame", {"frame": frame, "sim_time": t})
        if first_stop:
            dist = sim.tip_to_target_mm()
            finish(dist <= cfg.success_radius_mm,
                   None if dist <= cfg.success_radius_mm else "missed_target")
            return
        if "tip_out_of_bounds" in sim.events:
            finish(False, "out_of_bounds")
            return
        sched.call_at(t + 1.0 / cfg.sim_hz, 1, sim_tick)

    def do_track(t: float) -> Optional[_TrackMsg]:
        got = frame_slot.take_new(state["last_frame_seq"])
        if got is None:
            got = frame_slot.latest()
            if got is None:
                return None
        state["last_frame_seq"] = got[0]
        frame: Frame = got[1]
        stats["tracking"].staleness.append(t - frame.sim_time)
        st = tracker.update(frame.image, frame_id=frame.frame_id, timestamp=t)
        stats["tracking"].processed += 1
        if st.confidence < cfg.divergence_conf:
            state["low_conf_run"] += 1
        else:
            state["low_conf_run"] = 0
        return _TrackMsg(state=st, made_at=t,
                         available_at=t + cfg.tracking_latency_s)

    def decide(t: float, msg: _TrackMsg) -> Action:
        st = msg.state
        box = st.box
        tip = np.array([(box[0] + box[2]) / 2.0, (box[1] + box[3]) / 2.0])
        pi = PolicyInput(tip_img=tip, target_img=sim.target_image_px(),
                         entry_img=sim.entry_image_px(),
                         visibility=st.confidence,
                         mm_per_px=scenario.phantom.mm_per_px,
                         mode=scenario.mode,
                         pooled_register=st.pooled_register)
        action = policy_fn(pi)
        records.append({
            "t": round(t, 9), "tracked_tip": [float(tip[0]), float(tip[1])],
            "confidence": float(st.confidence),
            "raw_confidence": float(st.raw_confidence),
            "true_tip": [float(x) for x in sim.tip_image_px()],
            "dist_mm": sim.tip_to_target_mm(),
            "v_n": action.v_n_mm_s, "theta": action.theta_n_deg,
            "v_p": action.v_p_mm_s[0], "stop": bool(action.stop),
            "track_staleness_s": round(t - msg.available_at, 9),
        })
        if telemetry:
            telemetry("action", {"action": action, "sim_time": t,
                                 "confidence": float(st.confidence)})
        return action

    if cfg.pipeline == "async":
        def tracking_tick() -> None:
            if state["done"]:
                return
            t = sched.now
            if state["last_track_wake"] is not None:
                stats["tracking"].periods.append(t - state["last_track_wake"])
            state["last_track_wake"] = t
            msg = do_track(t)
            if msg is not None:
                def deliver(m=msg):
                    track_slot.publish(m)
                    if telemetry:
                        telemetry("track", {"state": m.state,
                                            "sim_time": sched.now})
                sched.call_at(msg.available_at, 0, deliver)
                if state["low_conf_run"] >= cfg.divergence_frames:
                    finish(False, "loss_of_visualization")
                    return
            sched.call_at(t + cfg.tracking_period_s, 2, tracking_tick)

        def control_tick() -> None:
            if state["done"]:
                return
            t = sched.now
            if state["last_ctrl_wake"] is not None:
                stats["control"].periods.append(t - state["last_ctrl_wake"])
            state["last_ctrl_wake"] = t
            got = track_slot.latest()
            if got is not None:
                msg: _TrackMsg = got[1]
                stats["control"].staleness.append(t - msg.available_at)
                action = decide(t, msg)
                sched.call_at(t + cfg.control_latency_s, 0,
                              lambda a=action: action_slot.publish(a))
                stats["control"].processed += 1
            sched.call_at(t + cfg.control_period_s, 3, control_tick)

        sched.call_at(sched.now + 1.0 / cfg.sim_hz, 1, sim_tick)
        sched.call_at(sched.now + cfg.tracking_period_s, 2, tracking_tick)
        sched.call_at(sched.now + cfg.control_period_s, 3, control_tick)
    else:  # sync: capture -> track -> decide chained in one loop
        def chain_tick() -> None:
            if state["done"]:
                return
            t = sched.now
            if state["last_track_wake"] is not None:
                stats["tracking"].periods.append(t - state["last_track_wake"])
                stats["control"].periods.append(t - state["last_ctrl_wake"])
            state["last_track_wake"] = t
            state["last_ctrl_wake"] = t
            msg = do_track(t)
            if msg is not None:
                track_slot.publish(msg)
                if telemetry:
                    telemetry("track", {"state": msg.state, "sim_time": t})
                if state["low_conf_run"] >= cfg.divergence_frames:
                    finish(False, "loss_of_visualization")
                    return
                stats["control"].staleness.append(0.0)  # consumed in-line
                action = decide(t, msg)
                stats["control"].processed += 1
                effective = t + cfg.tracking_latency_s + cfg.control_latency_s
                sched.call_at(effective, 0,
                              lambda a=action: action_slot.publish(a))
                sched.call_at(effective, 2, chain_tick)
            else:
                sched.call_at(t + cfg.tracking_period_s, 2, chain_tick)

        sched.call_at(sched.now + 1.0 / cfg.sim_hz, 1, sim_tick)
        sched.call_at(sched.now + cfg.tracking_period_s, 2, chain_tick)

    sched.run_until(sched.now + cfg.max_duration_s)
    if not state["done"]:
        finish(False, "timeout")

    result = TrialResult(
        success=state["success"], failure_reason=state["reason"],
        duration_s=float(state["end_t"] - t_start),
        final_dist_mm=float(state["final_dist"]),
        stop_commanded=state["stop_commanded"],
        events=list(sim.events),
        branch_stats={k: v.summary() for k, v in stats.items()},
        slots={s.name: {"published": s.published, "dropped": s.dropped}
               for s in (frame_slot, track_slot, action_slot)},
        records=records,
    )
    if telemetry:
        telemetry("result", {"result": result.to_meta()})
    if record_path is not None:
        write_trial_record(record_path, scenario, cfg, result,
                           extra_meta=record_meta)
    return result


# -- trial records ---------------------------------------------------------------


def write_trial_record(path: str | Path, scenario: InsertionScenario,
                       cfg: PipelineConfig, result: TrialResult,
                       extra_meta: Optional[dict] = None) -> None:
    """JSONL: one meta line, one line per control decision, one result line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"kind": "meta", "scenario": scenario.name,
            "mode": scenario.mode,
            "pipeline": cfg.pipeline,
            "sim_hz": cfg.sim_hz,
            "tracking_period_s": cfg.tracking_period_s,
            "control_latency_s": cfg.control_latency_s,
            "phantom_seed": scenario.phantom.seed,
            "pipeline_cfg": asdict(cfg)}
    if extra_meta:
        meta.update(extra_meta)
    with open(path, "w") as fh:
        fh.write(json.dumps(meta) + "\n")
        for rec in result.records:
            fh.write(json.dumps({"kind": "tick", **rec}) + "\n")
        fh.write(json.dumps({"kind": "result", **result.to_meta(),
                             "branch_stats": result.branch_stats,
                             "slots": result.slots}) + "\n")


def replay_policy(ticks: list[dict]) -> Callable[[PolicyInput], Action]:
    """Plays back recorded per-decision actions in order (record replay).

    With the same scenario and PipelineConfig the control branch wakes at
    the same virtual times, so feeding the recorded actions reproduces the
    trajectory exactly.  Holds the last action if called past the end.
    """
    idx = {"i": 0}

    def fn(pi: PolicyInput) -> Action:
        if not ticks:
            return Action(v_n_mm_s=0.0)
        i = min(idx["i"], len(ticks) - 1)
        idx["i"] += 1
        rec = ticks[i]
        return Action(theta_n_deg=rec["theta"], v_n_mm_s=rec["v_n"],
                      v_p_mm_s=(rec["v_p"], 0.0, 0.0), stop=rec["stop"])

    return fn


def read_trial_record(path: str | Path) -> dict:
    meta, ticks, result = None, [], None
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            kind = rec.pop("kind")
            if kind == "meta":
                meta = rec
            elif kind == "tick":
                ticks.append(rec)
            elif kind == "result":
                result = rec
            else:
                raise ConfigError(f"unknown record kind {kind!r}")
    if meta is None or result is None:
        raise ConfigError(f"trial record {path} is missing meta/result lines")
    return {"meta": meta, "ticks": ticks, "result": result}
