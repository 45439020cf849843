/** DOM wiring: WebSocket, widgets, render loop. All logic sits in ViewModel. */

import { StripChart } from "./chart.js";
import { parseFrame, parseServerMessage, StartTrialForm } from "./protocol.js";
import { FrameRenderer } from "./render.js";
import { clickToImagePx, overlayGeometry, ViewModel } from "./viewmodel.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (node === null) throw new Error(`missing #${id}`);
  return node as T;
}

const view = el<HTMLCanvasElement>("view");
const chartCanvas = el<HTMLCanvasElement>("chart");
const banner = el<HTMLDivElement>("banner");
const statusDot = el<HTMLSpanElement>("conn-status");
const fpsOut = el<HTMLSpanElement>("fps");
const readout = {
  vn: el<HTMLSpanElement>("ro-vn"),
  theta: el<HTMLSpanElement>("ro-theta"),
  vis: el<HTMLDivElement>("ro-vis-bar"),
  visText: el<HTMLSpanElement>("ro-vis"),
  time: el<HTMLSpanElement>("ro-time"),
  status: el<HTMLSpanElement>("ro-status"),
  ack: el<HTMLSpanElement>("ro-ack"),
  error: el<HTMLSpanElement>("ro-error"),
  target: el<HTMLSpanElement>("ro-target"),
};
const form = {
  control: el<HTMLSelectElement>("f-control"),
  mode: el<HTMLSelectElement>("f-mode"),
  occlusion: el<HTMLSelectElement>("f-occlusion"),
  policy: el<HTMLSelectElement>("f-policy"),
  seed: el<HTMLInputElement>("f-seed"),
  duration: el<HTMLInputElement>("f-duration"),
  start: el<HTMLButtonElement>("f-start"),
  clearTarget: el<HTMLButtonElement>("f-clear-target"),
};
const manual = {
  vn: el<HTMLInputElement>("m-vn"),
  theta: el<HTMLInputElement>("m-theta"),
  jogLeft: el<HTMLButtonElement>("m-jog-left"),
  jogRight: el<HTMLButtonElement>("m-jog-right"),
  stop: el<HTMLButtonElement>("m-stop"),
  abort: el<HTMLButtonElement>("m-abort"),
};

const wsUrl =
  (location.protocol === "https:" ? "wss://" : "ws://") +
  (location.host || "127.0.0.1:8765") +
  "/ws";
let ws: WebSocket | null = null;

const vm = new ViewModel((msg) => {
  if (ws !== null && ws.readyState === WebSocket.OPEN) {
    ws.send(JSON.stringify(msg));
  }
});

function connect(): void {
  ws = new WebSocket(wsUrl);
  ws.binaryType = "arraybuffer";
  ws.onopen = () => {
    vm.onOpen();
    refresh();
  };
  ws.onclose = () => {
    vm.onClose();
    refresh();
    setTimeout(connect, 2000); // retry; the banner shows the lockout meanwhile
  };
  ws.onmessage = (ev: MessageEvent) => {
    if (typeof ev.data === "string") {
      vm.onMessage(parseServerMessage(ev.data));
      refresh();
    } else {
      vm.onFrame(parseFrame(ev.data as ArrayBuffer));
    }
  };
}

// -- input wiring (each handler emits exactly one CommandMessage) ----------------

form.start.addEventListener("click", () => {
  const f: StartTrialForm = {
    control: form.control.value as "AUTO" | "MANUAL",
    mode: form.mode.value as "IPS" | "IPM",
    occlusion: form.occlusion.value,
  };
  if (form.seed.value !== "") f.seed = parseInt(form.seed.value, 10);
  if (form.duration.value !== "") {
    f.max_duration_s = parseFloat(form.duration.value);
  }
  if (form.control.value === "AUTO") f.policy = form.policy.value;
  vm.startTrial(f);
});
form.clearTarget.addEventListener("click", () => {
  vm.pickedTarget = null;
  refresh();
});
view.addEventListener("click", (ev: MouseEvent) => {
  if (vm.trialActive) return; // the picker feeds the next start_trial
  const rect = view.getBoundingClientRect();
  const px = clickToImagePx(
    ev.clientX - rect.left,
    ev.clientY - rect.top,
    rect.width,
    rect.height,
    view.width,
    view.height,
  );
  vm.pickTarget(px);
  refresh();
});

manual.vn.addEventListener("change", () => {
  vm.setVn(parseFloat(manual.vn.value));
});
manual.theta.addEventListener("change", () => {
  vm.setTheta(parseFloat(manual.theta.value));
});
bindJog(manual.jogLeft, -10);
bindJog(manual.jogRight, 10);
manual.stop.addEventListener("click", () => vm.stop());
manual.abort.addEventListener("click", () => vm.abort());

function bindJog(button: HTMLButtonElement, vx: number): void {
  button.addEventListener("mousedown", () => vm.jogProbe([vx, 0, 0]));
  button.addEventListener("mouseup", () => vm.jogProbe([0, 0, 0]));
  button.addEventListener("mouseleave", () => {
    if (button.matches(":active")) vm.jogProbe([0, 0, 0]);
  });
}

window.addEventListener("keydown", (ev: KeyboardEvent) => {
  if (ev.target instanceof HTMLInputElement) return;
  if (vm.onKey(ev.key)) ev.preventDefault();
});

// -- state -> DOM ------------------------------------------------------------------

function refresh(): void {
  statusDot.className = vm.connected ? "dot ok" : "dot bad";
  const manualOn = vm.manualControlsEnabled();
  manual.vn.disabled = !manualOn;
  manual.theta.disabled = !manualOn;
  manual.jogLeft.disabled = !manualOn || vm.trial?.mode !== "IPM";
  manual.jogRight.disabled = !manualOn || vm.trial?.mode !== "IPM";
  manual.stop.disabled = !manualOn;
  manual.abort.disabled = !vm.trialActive;
  const formOn = vm.startFormEnabled();
  for (const node of [form.control, form.mode, form.occlusion, form.policy,
                      form.seed, form.duration, form.start]) {
    (node as HTMLInputElement).disabled = !formOn;
  }
  form.policy.disabled = !formOn || form.control.value !== "AUTO";

  if (manualOn) {
    manual.vn.value = String(vm.desiredVn);
    manual.theta.value = String(vm.desiredTheta);
  }
  const t = vm.telemetry;
  readout.vn.textContent = t === null ? "–" : t.v_n.toFixed(1);
  readout.theta.textContent = t === null ? "–" : t.theta_n.toFixed(1);
  const vis = t?.visibility ?? null;
  readout.visText.textContent = vis === null ? "–" : vis.toFixed(2);
  readout.vis.style.width = `${Math.round((vis ?? 0) * 100)}%`;
  readout.time.textContent = vm.trialTimerSeconds().toFixed(1);
  readout.status.textContent = vm.trialActive
    ? `trial ${vm.trial?.trial_id} (${vm.trial?.control} ${vm.trial?.mode})`
    : "idle";
  readout.ack.textContent = vm.lastAck === null
    ? ""
    : `${vm.lastAck.cmd} → ${JSON.stringify(vm.lastAck.applied)}`;
  readout.error.textContent = vm.lastError ?? "";
  readout.target.textContent = vm.pickedTarget === null
    ? "click the image to pick"
    : `(${vm.pickedTarget[0].toFixed(0)}, ${vm.pickedTarget[1].toFixed(0)})`;

  if (vm.banner === null) {
    banner.className = "banner hidden";
    banner.textContent = "";
  } else {
    banner.className = `banner ${vm.banner.kind}`;
    banner.textContent = vm.banner.text;
  }
}

// -- render loop --------------------------------------------------------------------

const renderer = new FrameRenderer(view);
const chart = new StripChart(chartCanvas, 20);
let framesDrawn = 0;
let lastFpsAt = performance.now();

function loop(): void {
  const frame = vm.takeFrame();
  if (frame !== null) {
    renderer.drawFrame(frame);
    renderer.drawOverlay(
      overlayGeometry(vm.telemetry, vm.trial),
      vm.pickedTarget,
    );
    chart.draw(vm.vnSeries);
    readout.time.textContent = vm.trialTimerSeconds().toFixed(1);
    framesDrawn += 1;
  }
  const now = performance.now();
  if (now - lastFpsAt >= 1000) {
    fpsOut.textContent = `${framesDrawn} fps`;
    framesDrawn = 0;
    lastFpsAt = now;
  }
  requestAnimationFrame(loop);
}

connect();
refresh();
requestAnimationFrame(loop);
