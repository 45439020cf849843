import { describe, expect, it } from "vitest";
import {
  FRAME_HEADER_BYTES,
  parseFrame,
  parseServerMessage,
} from "../src/protocol.js";

function buildFrame(
  seq: number,
  frameId: number,
  simTime: number,
  h: number,
  w: number,
): ArrayBuffer {
  const buf = new ArrayBuffer(FRAME_HEADER_BYTES + h * w);
  const dv = new DataView(buf);
  dv.setUint32(0, seq, true);
  dv.setUint32(4, frameId, true);
  dv.setFloat64(8, simTime, true);
  dv.setUint16(16, h, true);
  dv.setUint16(18, w, true);
  const px = new Uint8Array(buf, FRAME_HEADER_BYTES);
  for (let i = 0; i < px.length; i++) px[i] = (i * 7) & 0xff;
  return buf;
}

describe("parseFrame", () => {
  it("decodes the little-endian header and pixel payload", () => {
    const f = parseFrame(buildFrame(42, 7, 1.25, 4, 5));
    expect(f.seq).toBe(42);
    expect(f.frameId).toBe(7);
    expect(f.simTime).toBeCloseTo(1.25, 12);
    expect(f.height).toBe(4);
    expect(f.width).toBe(5);
    expect(f.pixels.length).toBe(20);
    expect(Array.from(f.pixels.slice(0, 4))).toEqual([0, 7, 14, 21]);
  });

  it("rejects buffers shorter than the header", () => {
    expect(() => parseFrame(new ArrayBuffer(10))).toThrow(/too short/);
  });

  it("rejects payloads that disagree with the header dimensions", () => {
    const buf = buildFrame(1, 1, 0.0, 4, 5);
    expect(() => parseFrame(buf.slice(0, buf.byteLength - 3))).toThrow(
      /mismatch/,
    );
  });
});

describe("parseServerMessage", () => {
  it("passes through typed JSON objects", () => {
    const msg = parseServerMessage('{"type":"error","message":"nope"}');
    expect(msg.type).toBe("error");
  });

  it("rejects non-objects and untyped objects", () => {
    expect(() => parseServerMessage("42")).toThrow();
    expect(() => parseServerMessage("[1,2]")).toThrow();
    expect(() => parseServerMessage('{"message":"x"}')).toThrow();
    expect(() => parseServerMessage("not json")).toThrow();
  });
});
