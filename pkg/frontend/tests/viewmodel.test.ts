import { beforeEach, describe, expect, it } from "vitest";
import type { FrameMsg, Telemetry, TrialStarted } from "../src/protocol.js";
import {
  clickToImagePx,
  overlayGeometry,
  ViewModel,
} from "../src/viewmodel.js";

function started(control: "AUTO" | "MANUAL"): TrialStarted {
  return {
    type: "trial_started",
    trial_id: 1,
    control,
    mode: "IPM",
    occlusion: "none",
    seed: 7,
    pipeline: "async",
    policy: control === "AUTO" ? "uncertainty" : null,
    mm_per_px: 0.5,
    image_size: [256, 256],
    target_px: [140, 130],
    entry_px: [12, 91],
    theta0_deg: 42,
    success_radius_mm: 5,
    max_duration_s: 60,
    record: "trial_001.jsonl",
  };
}

function telem(simTime: number, vn: number): Telemetry {
  return {
    type: "telemetry",
    seq: Math.round(simTime * 25),
    trial_id: 1,
    status: "running",
    sim_time: simTime,
    frame_id: Math.round(simTime * 25),
    target_px: [140, 130],
    entry_px: [12, 91],
    box: [100, 90, 12, 12],
    visibility: 0.8,
    raw_confidence: 0.7,
    track_sim_time: simTime,
    v_n: vn,
    theta_n: 42,
    v_p: [0, 0, 0],
    stop: false,
    action_sim_time: simTime,
  };
}

function frame(seq: number): FrameMsg {
  return {
    seq,
    frameId: seq,
    simTime: seq * 0.04,
    height: 2,
    width: 2,
    pixels: new Uint8Array([seq, 0, 0, 0]),
  };
}

let sent: Record<string, unknown>[];
let vm: ViewModel;

beforeEach(() => {
  sent = [];
  vm = new ViewModel((msg) => sent.push(msg));
});

describe("command gating", () => {
  it("drops actuator commands until a MANUAL trial is live", () => {
    vm.setVn(5);
    vm.stop();
    expect(sent).toEqual([]);
    vm.onOpen();
    vm.onMessage(started("MANUAL"));
    vm.setVn(5);
    expect(sent).toEqual([{ type: "set_v_n", value: 5 }]);
  });

  it("never emits actuator commands during an AUTO trial", () => {
    vm.onOpen();
    vm.onMessage(started("AUTO"));
    vm.setVn(5);
    vm.setTheta(30);
    vm.jogProbe([10, 0, 0]);
    vm.stop();
    vm.onKey("ArrowUp");
    vm.onKey("+");
    expect(sent).toEqual([]);
    expect(vm.manualControlsEnabled()).toBe(false);
    vm.abort(); // the one command AUTO accepts from the console
    expect(sent).toEqual([{ type: "abort" }]);
  });

  it("locks every control on disconnect", () => {
    vm.onOpen();
    vm.onMessage(started("MANUAL"));
    vm.onClose();
    vm.setVn(5);
    vm.abort();
    vm.startTrial({ control: "MANUAL", mode: "IPS", occlusion: "none" });
    expect(sent).toEqual([]);
    expect(vm.banner?.kind).toBe("disconnect");
  });

  it("blocks the start form while a trial is active", () => {
    vm.onOpen();
    vm.onMessage(started("MANUAL"));
    expect(vm.startFormEnabled()).toBe(false);
    vm.startTrial({ control: "AUTO", mode: "IPS", occlusion: "none" });
    expect(sent).toEqual([]);
  });
});

describe("one message per input", () => {
  beforeEach(() => {
    vm.onOpen();
    vm.onMessage(started("MANUAL"));
  });

  it("maps keys to single clamped-by-server setpoint commands", () => {
    expect(vm.onKey("ArrowUp")).toBe(true);
    expect(vm.onKey("+")).toBe(true);
    expect(vm.onKey("x")).toBe(false);
    expect(sent).toEqual([
      { type: "set_theta_n", value: 40 }, // theta0 42 steered up by 2
      { type: "set_v_n", value: 1 },
    ]);
  });

  it("sends jog vectors and stop verbatim", () => {
    vm.jogProbe([-10, 0, 0]);
    vm.jogProbe([0, 0, 0]);
    vm.stop();
    expect(sent).toEqual([
      { type: "jog_probe", value: [-10, 0, 0] },
      { type: "jog_probe", value: [0, 0, 0] },
      { type: "stop" },
    ]);
  });

  it("reflects server-applied values from acks into the setpoints", () => {
    vm.setVn(99);
    expect(vm.desiredVn).toBe(99); // optimistic
    vm.onMessage({
      type: "ack",
      cmd: "set_v_n",
      requested: 99,
      applied: 20,
      trial_id: 1,
      sim_time: 0.5,
    });
    expect(vm.desiredVn).toBe(20); // corrected by the server clamp
  });
});

describe("start form", () => {
  it("merges the picked target and lets an explicit one win", () => {
    vm.onOpen();
    vm.pickTarget([140, 130]);
    vm.startTrial({ control: "MANUAL", mode: "IPM", occlusion: "none" });
    vm.startTrial({
      control: "MANUAL",
      mode: "IPM",
      occlusion: "none",
      target_px: [90, 80],
    });
    expect(sent[0]?.target_px).toEqual([140, 130]);
    expect(sent[1]?.target_px).toEqual([90, 80]);
  });
});

describe("telemetry and frames", () => {
  beforeEach(() => {
    vm.onOpen();
    vm.onMessage(started("MANUAL"));
  });

  it("accumulates the speed series in arrival order", () => {
    for (const [t, v] of [[0.1, 0], [0.2, 5], [0.3, 5]] as const) {
      vm.onMessage(telem(t, v));
    }
    expect(vm.vnSeries).toEqual([
      { t: 0.1, v: 0 },
      { t: 0.2, v: 5 },
      { t: 0.3, v: 5 },
    ]);
    expect(vm.trialTimerSeconds()).toBeCloseTo(0.3, 12);
  });

  it("keeps only the newest unrendered frame", () => {
    vm.onFrame(frame(1));
    vm.onFrame(frame(2));
    vm.onFrame(frame(3));
    expect(vm.framesDropped).toBe(2);
    expect(vm.takeFrame()?.seq).toBe(3);
    expect(vm.takeFrame()).toBeNull();
  });

  it("resets per-trial state on the next trial_started", () => {
    vm.onMessage(telem(0.1, 5));
    vm.onMessage(started("MANUAL"));
    expect(vm.vnSeries).toEqual([]);
    expect(vm.telemetry).toBeNull();
    expect(vm.desiredTheta).toBe(42);
    expect(vm.desiredVn).toBe(0);
  });
});

describe("trial verdict banner", () => {
  beforeEach(() => {
    vm.onOpen();
    vm.onMessage(started("MANUAL"));
  });

  it("stays empty on telemetry, acks, and errors", () => {
    vm.onMessage(telem(0.1, 5));
    vm.onMessage({ type: "error", message: "nope" });
    expect(vm.banner).toBeNull();
    expect(vm.lastError).toBe("nope");
  });

  it("shows only the server-reported verdict", () => {
    vm.onMessage({
      type: "trial_end",
      trial_id: 1,
      success: true,
      failure_reason: null,
      duration_s: 12.3,
      final_dist_mm: 3.2,
      stop_commanded: true,
      events: [],
      record: "trial_001.jsonl",
    });
    expect(vm.trialActive).toBe(false);
    expect(vm.banner?.kind).toBe("success");
    expect(vm.banner?.text).toContain("12.3");
    vm.onMessage(started("MANUAL"));
    vm.onMessage({
      type: "trial_end",
      trial_id: 2,
      success: false,
      failure_reason: "timeout",
      duration_s: 60,
      final_dist_mm: 22,
      stop_commanded: false,
      events: [],
      record: "trial_002.jsonl",
    });
    expect(vm.banner?.kind).toBe("failure");
    expect(vm.banner?.text).toContain("timeout");
  });
});

describe("geometry", () => {
  it("maps scaled canvas clicks back to image pixels", () => {
    expect(clickToImagePx(256, 128, 512, 512, 256, 256)).toEqual([128, 64]);
    expect(clickToImagePx(0, 0, 512, 512, 256, 256)).toEqual([0, 0]);
  });

  it("draws telemetry coordinates verbatim with a mm-derived radius", () => {
    const o = overlayGeometry(telem(0.1, 5), started("MANUAL"));
    expect(o.box).toEqual([100, 90, 12, 12]);
    expect(o.target).toEqual({ cx: 140, cy: 130, r: 10 }); // 5 mm / 0.5 mm/px
    expect(o.entry).toEqual([12, 91]);
    expect(overlayGeometry(null, null)).toEqual({
      box: null,
      target: null,
      entry: null,
    });
  });
});
