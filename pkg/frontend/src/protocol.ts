/** Gateway wire protocol v1 (docs/protocol.md). Types + binary frame parser. */

export const PROTOCOL_VERSION = 1;

export interface Hello {
  type: "hello";
  protocol: number;
  session: string;
  limits: {
    v_n_mm_s: [number, number];
    theta_n_deg: [number, number];
    v_p_mm_s: [number, number];
  };
  debug_gt: boolean;
  speed: number;
  frame_stride: number;
}

export interface Ack {
  type: "ack";
  cmd: string;
  requested: unknown;
  applied: unknown;
  trial_id: number;
  sim_time: number;
}

export interface ErrorMsg {
  type: "error";
  message: string;
  cmd?: string;
}

export interface TrialStarted {
  type: "trial_started";
  trial_id: number;
  control: "AUTO" | "MANUAL";
  mode: "IPS" | "IPM";
  occlusion: string;
  seed: number;
  pipeline: string;
  policy: string | null;
  mm_per_px: number;
  image_size: [number, number]; // [height, width]
  target_px: [number, number];
  entry_px: [number, number];
  theta0_deg: number;
  success_radius_mm: number;
  max_duration_s: number;
  record: string;
}

export interface Telemetry {
  type: "telemetry";
  seq: number;
  trial_id: number;
  status: string;
  sim_time: number;
  frame_id: number;
  target_px: [number, number];
  entry_px: [number, number];
  box: [number, number, number, number] | null;
  visibility: number | null;
  raw_confidence: number | null;
  track_sim_time: number | null;
  v_n: number;
  theta_n: number;
  v_p: [number, number, number];
  stop: boolean;
  action_sim_time: number | null;
  gt_box?: [number, number, number, number] | null;
  gt_visibility?: number | null;
}

export interface TrialEnd {
  type: "trial_end";
  trial_id: number;
  success: boolean;
  failure_reason: string | null;
  duration_s: number;
  final_dist_mm: number;
  stop_commanded: boolean;
  events: string[];
  record: string;
}

export type ServerMessage =
  | Hello
  | Ack
  | ErrorMsg
  | TrialStarted
  | Telemetry
  | TrialEnd;

export interface StartTrialForm {
  control: "AUTO" | "MANUAL";
  mode: "IPS" | "IPM";
  occlusion: string;
  seed?: number;
  pipeline?: string;
  policy?: string;
  target_px?: [number, number];
  max_duration_s?: number;
}

/** One decoded binary frame message. */
export interface FrameMsg {
  seq: number;
  frameId: number;
  simTime: number;
  height: number;
  width: number;
  pixels: Uint8Array; // row-major grayscale
}

export const FRAME_HEADER_BYTES = 20;

/** Parse a binary frame: 20-byte little-endian header + u8 pixels. */
export function parseFrame(buf: ArrayBuffer): FrameMsg {
  if (buf.byteLength < FRAME_HEADER_BYTES) {
    throw new Error(`frame message too short: ${buf.byteLength} bytes`);
  }
  const dv = new DataView(buf);
  const seq = dv.getUint32(0, true);
  const frameId = dv.getUint32(4, true);
  const simTime = dv.getFloat64(8, true);
  const height = dv.getUint16(16, true);
  const width = dv.getUint16(18, true);
  const expected = FRAME_HEADER_BYTES + height * width;
  if (buf.byteLength !== expected) {
    throw new Error(
      `frame payload mismatch: got ${buf.byteLength}, expected ${expected}`,
    );
  }
  return {
    seq,
    frameId,
    simTime,
    height,
    width,
    pixels: new Uint8Array(buf, FRAME_HEADER_BYTES),
  };
}

export function parseServerMessage(text: string): ServerMessage {
  const msg = JSON.parse(text);
  if (typeof msg !== "object" || msg === null || typeof msg.type !== "string") {
    throw new Error("malformed server message");
  }
  return msg as ServerMessage;
}
