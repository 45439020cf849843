/** Canvas painting: grayscale frame + overlays at native image resolution.
 *
 * The canvas backing store equals the image size, so overlay coordinates
 * are telemetry coordinates — equality to the pixel by construction; CSS
 * scales the element up with image-rendering: pixelated.
 */

import { FrameMsg } from "./protocol.js";
import { Overlay } from "./viewmodel.js";

export class FrameRenderer {
  private ctx: CanvasRenderingContext2D;
  private imageData: ImageData | null = null;

  constructor(private canvas: HTMLCanvasElement) {
    const ctx = canvas.getContext("2d");
    if (ctx === null) throw new Error("2d canvas context unavailable");
    this.ctx = ctx;
  }

  drawFrame(frame: FrameMsg): void {
    const { width, height, pixels } = frame;
    if (this.canvas.width !== width || this.canvas.height !== height) {
      this.canvas.width = width;
      this.canvas.height = height;
      this.imageData = null;
    }
    if (this.imageData === null) {
      this.imageData = this.ctx.createImageData(width, height);
    }
    const rgba = this.imageData.data;
    for (let i = 0; i < pixels.length; i++) {
      const v = pixels[i] ?? 0;
      const j = i * 4;
      rgba[j] = v;
      rgba[j + 1] = v;
      rgba[j + 2] = v;
      rgba[j + 3] = 255;
    }
    this.ctx.putImageData(this.imageData, 0, 0);
  }

  drawOverlay(overlay: Overlay, pickedTarget: [number, number] | null): void {
    const ctx = this.ctx;
    if (overlay.box !== null) {
      const [x1, y1, x2, y2] = overlay.box;
      ctx.strokeStyle = "#30d158";
      ctx.lineWidth = 1;
      ctx.strokeRect(x1, y1, x2 - x1, y2 - y1);
    }
    if (overlay.target !== null) {
      const { cx, cy, r } = overlay.target;
      ctx.strokeStyle = "#ff9f0a";
      ctx.lineWidth = 1;
      ctx.beginPath();
      ctx.arc(cx, cy, r, 0, Math.PI * 2);
      ctx.stroke();
      crosshair(ctx, cx, cy, 3, "#ff9f0a");
    }
    if (overlay.entry !== null) {
      crosshair(ctx, overlay.entry[0], overlay.entry[1], 3, "#64d2ff");
    }
    if (pickedTarget !== null) {
      crosshair(ctx, pickedTarget[0], pickedTarget[1], 4, "#ff375f");
    }
  }
}

function crosshair(
  ctx: CanvasRenderingContext2D,
  x: number,
  y: number,
  r: number,
  color: string,
): void {
  ctx.strokeStyle = color;
  ctx.lineWidth = 1;
  ctx.beginPath();
  ctx.moveTo(x - r, y);
  ctx.lineTo(x + r, y);
  ctx.moveTo(x, y - r);
  ctx.lineTo(x, y + r);
  ctx.stroke();
}
