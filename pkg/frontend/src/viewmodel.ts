/** UI state machine, DOM-free so the contracts are unit-testable.
 *
 * Latest-wins frame handling, the strip chart series, widget enablement,
 * and the no-actuator-commands-in-AUTO invariant all live here; the DOM
 * layer only reflects this state and forwards input events.
 */

import {
  Ack,
  FrameMsg,
  ServerMessage,
  StartTrialForm,
  Telemetry,
  TrialEnd,
  TrialStarted,
} from "./protocol.js";

export type SendFn = (msg: Record<string, unknown>) => void;

export interface Banner {
  kind: "success" | "failure" | "disconnect";
  text: string;
}

export interface VnSample {
  t: number;
  v: number;
}

export const THETA_STEP_DEG = 2.0;
export const VN_STEP = 1.0;

export class ViewModel {
  connected = false;
  hello: ServerMessage | null = null;
  trial: TrialStarted | null = null;
  trialActive = false;
  telemetry: Telemetry | null = null;
  lastEnd: TrialEnd | null = null;
  lastAck: Ack | null = null;
  lastError: string | null = null;
  banner: Banner | null = null;
  vnSeries: VnSample[] = [];
  /** frames that arrived but were replaced before a render consumed them */
  framesDropped = 0;

  /** operator setpoints (what the widgets show; the server still clamps) */
  desiredVn = 0;
  desiredTheta = 45;

  pickedTarget: [number, number] | null = null;

  private pendingFrame: FrameMsg | null = null;
  private send: SendFn;

  constructor(send: SendFn) {
    this.send = send;
  }

  // -- inbound -----------------------------------------------------------------

  onOpen(): void {
    this.connected = true;
    this.banner = null;
  }

  onClose(): void {
    this.connected = false;
    this.trialActive = false;
    this.banner = { kind: "disconnect", text: "connection lost" };
  }

  onMessage(msg: ServerMessage): void {
    switch (msg.type) {
      case "hello":
        this.hello = msg;
        break;
      case "trial_started":
        this.trial = msg;
        this.trialActive = true;
        this.telemetry = null;
        this.lastEnd = null;
        this.banner = null;
        this.vnSeries = [];
        this.desiredTheta = msg.theta0_deg;
        this.desiredVn = 0;
        break;
      case "telemetry":
        this.telemetry = msg;
        this.vnSeries.push({ t: msg.sim_time, v: msg.v_n });
        break;
      case "trial_end": {
        this.trialActive = false;
        this.lastEnd = msg;
        // the banner verdict comes from the server, never computed here
        if (msg.success) {
          this.banner = {
            kind: "success",
            text: `success in ${msg.duration_s.toFixed(1)} s ` +
              `(${msg.final_dist_mm.toFixed(1)} mm from target)`,
          };
        } else {
          this.banner = {
            kind: "failure",
            text: `failed: ${msg.failure_reason} after ` +
              `${msg.duration_s.toFixed(1)} s`,
          };
        }
        break;
      }
      case "ack":
        this.lastAck = msg;
        // reflect the server-applied value so the readout never lies
        if (msg.cmd === "set_v_n") this.desiredVn = Number(msg.applied);
        if (msg.cmd === "set_theta_n") this.desiredTheta = Number(msg.applied);
        break;
      case "error":
        this.lastError = msg.message;
        break;
    }
  }

  /** Latest-wins: a new frame replaces any unrendered one. */
  onFrame(frame: FrameMsg): void {
    if (this.pendingFrame !== null) this.framesDropped += 1;
    this.pendingFrame = frame;
  }

  /** The render loop takes the newest frame, or null if nothing new. */
  takeFrame(): FrameMsg | null {
    const f = this.pendingFrame;
    this.pendingFrame = null;
    return f;
  }

  // -- derived state -----------------------------------------------------------

  /** Manual actuator widgets are live only in an active MANUAL trial. */
  manualControlsEnabled(): boolean {
    return (
      this.connected &&
      this.trialActive &&
      this.trial !== null &&
      this.trial.control === "MANUAL"
    );
  }

  startFormEnabled(): boolean {
    return this.connected && !this.trialActive;
  }

  trialTimerSeconds(): number {
    if (this.trial === null) return 0;
    return this.telemetry === null ? 0 : this.telemetry.sim_time;
  }

  // -- outbound (each input emits exactly one CommandMessage) -------------------

  startTrial(form: StartTrialForm): void {
    if (!this.startFormEnabled()) return;
    const msg: Record<string, unknown> = { type: "start_trial", ...form };
    if (this.pickedTarget !== null && form.target_px === undefined) {
      msg.target_px = this.pickedTarget;
    }
    this.send(msg);
  }

  setVn(value: number): void {
    if (!this.manualControlsEnabled()) return;
    this.desiredVn = value;
    this.send({ type: "set_v_n", value });
  }

  bumpVn(delta: number): void {
    this.setVn(this.desiredVn + delta);
  }

  setTheta(value: number): void {
    if (!this.manualControlsEnabled()) return;
    this.desiredTheta = value;
    this.send({ type: "set_theta_n", value });
  }

  bumpTheta(delta: number): void {
    this.setTheta(this.desiredTheta + delta);
  }

  jogProbe(vec: [number, number, number]): void {
    if (!this.manualControlsEnabled()) return;
    this.send({ type: "jog_probe", value: vec });
  }

  stop(): void {
    if (!this.manualControlsEnabled()) return;
    this.send({ type: "stop" });
  }

  abort(): void {
    if (!this.connected || !this.trialActive) return;
    this.send({ type: "abort" });
  }

  /** Keyboard map: arrows steer the angle, +/- the speed. One message each. */
  onKey(key: string): boolean {
    switch (key) {
      case "ArrowUp":
        this.bumpTheta(-THETA_STEP_DEG);
        return true;
      case "ArrowDown":
        this.bumpTheta(THETA_STEP_DEG);
        return true;
      case "+":
      case "=":
        this.bumpVn(VN_STEP);
        return true;
      case "-":
      case "_":
        this.bumpVn(-VN_STEP);
        return true;
      default:
        return false;
    }
  }

  pickTarget(px: [number, number]): void {
    this.pickedTarget = px;
  }
}

/** Overlay geometry is the telemetry verbatim: no client-side smoothing. */
export interface Overlay {
  box: [number, number, number, number] | null;
  target: { cx: number; cy: number; r: number } | null;
  entry: [number, number] | null;
}

export function overlayGeometry(
  t: Telemetry | null,
  trial: TrialStarted | null,
): Overlay {
  if (t === null || trial === null) {
    return { box: null, target: null, entry: null };
  }
  return {
    box: t.box,
    target: {
      cx: t.target_px[0],
      cy: t.target_px[1],
      r: trial.success_radius_mm / trial.mm_per_px,
    },
    entry: t.entry_px,
  };
}

/** Map a click on the scaled canvas to image pixels (pass-through coords). */
export function clickToImagePx(
  offsetX: number,
  offsetY: number,
  clientW: number,
  clientH: number,
  imageW: number,
  imageH: number,
): [number, number] {
  return [(offsetX / clientW) * imageW, (offsetY / clientH) * imageH];
}
