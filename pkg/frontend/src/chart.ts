/** v_n-versus-time strip chart; plots the telemetry series verbatim. */

import { VnSample } from "./viewmodel.js";

export class StripChart {
  private ctx: CanvasRenderingContext2D;

  constructor(
    private canvas: HTMLCanvasElement,
    private vMax: number,
    private windowS = 20,
  ) {
    const ctx = canvas.getContext("2d");
    if (ctx === null) throw new Error("2d canvas context unavailable");
    this.ctx = ctx;
  }

  draw(series: VnSample[]): void {
    const { width: w, height: h } = this.canvas;
    const ctx = this.ctx;
    ctx.fillStyle = "#111418";
    ctx.fillRect(0, 0, w, h);
    ctx.strokeStyle = "#2c3138";
    ctx.lineWidth = 1;
    for (const frac of [0.25, 0.5, 0.75]) {
      const y = h * frac;
      ctx.beginPath();
      ctx.moveTo(0, y);
      ctx.lineTo(w, y);
      ctx.stroke();
    }
    const last = series[series.length - 1];
    if (last === undefined) return;
    const tEnd = last.t;
    const t0 = Math.max(0, tEnd - this.windowS);
    const span = Math.max(this.windowS, tEnd - t0);
    ctx.strokeStyle = "#30d158";
    ctx.lineWidth = 1.5;
    ctx.beginPath();
    let started = false;
    for (const s of series) {
      if (s.t < t0) continue;
      const x = ((s.t - t0) / span) * w;
      const y = h - (s.v / this.vMax) * (h - 4) - 2;
      if (!started) {
        ctx.moveTo(x, y);
        started = true;
      } else {
        ctx.lineTo(x, y);
      }
    }
    ctx.stroke();
    ctx.fillStyle = "#9ba3ad";
    ctx.font = "10px system-ui, sans-serif";
    ctx.fillText(`${this.vMax} mm/s`, 4, 11);
    ctx.fillText("0", 4, h - 3);
  }
}
