// DOM control panel: one slider per vertex group, transport buttons, timestep
// input, external charge tools, status/stale indicators.

import { SceneInfo } from "./protocol.js";
import { ViewerSession } from "./session.js";

export interface PanelHooks {
  onAddCharge: (chargeUC: number) => void;
}

export class ControlPanel {
  private root: HTMLElement;
  private session: ViewerSession;
  private hooks: PanelHooks;
  private sliderInputs = new Map<string, HTMLInputElement>();
  private sliderLabels = new Map<string, HTMLElement>();
  private statusLine: HTMLElement;
  private staleBadge: HTMLElement;
  private frameLine: HTMLElement;
  private toastLine: HTMLElement;
  private toastTimer: ReturnType<typeof setTimeout> | null = null;

  constructor(root: HTMLElement, session: ViewerSession, hooks: PanelHooks) {
    this.root = root;
    this.session = session;
    this.hooks = hooks;
    this.statusLine = document.createElement("div");
    this.staleBadge = document.createElement("span");
    this.frameLine = document.createElement("div");
    this.toastLine = document.createElement("div");
  }

  build(scene: SceneInfo): void {
    this.root.innerHTML = "";
    this.sliderInputs.clear();
    this.sliderLabels.clear();

    const title = document.createElement("h2");
    title.textContent = scene.name;
    this.root.appendChild(title);

    this.staleBadge.className = "stale-badge hidden";
    this.staleBadge.textContent = "STALE";
    title.appendChild(this.staleBadge);

    this.frameLine.className = "frame-line";
    this.root.appendChild(this.frameLine);

    const transport = document.createElement("div");
    transport.className = "transport";
    for (const [label, action] of [
      ["play", () => this.session.play()],
      ["pause", () => this.session.pause()],
      ["reset", () => this.session.reset()],
    ] as const) {
      const button = document.createElement("button");
      button.textContent = label;
      button.addEventListener("click", action);
      transport.appendChild(button);
    }
    this.root.appendChild(transport);

    const hRow = document.createElement("div");
    hRow.className = "row";
    const hLabel = document.createElement("label");
    hLabel.textContent = "timestep s ";
    const hInput = document.createElement("input");
    hInput.type = "number";
    hInput.step = "0.005";
    hInput.min = "0.0001";
    hInput.value = String(scene.h);
    hInput.addEventListener("change", () => {
      const value = parseFloat(hInput.value);
      if (isFinite(value) && value > 0) this.session.setTimestep(value);
    });
    hLabel.appendChild(hInput);
    hRow.appendChild(hLabel);
    this.root.appendChild(hRow);

    const sliders = document.createElement("div");
    sliders.className = "sliders";
    for (const [name, info] of Object.entries(scene.groups)) {
      const row = document.createElement("div");
      row.className = "row";
      const label = document.createElement("label");
      label.textContent = name;
      const value = document.createElement("span");
      value.className = "value";
      value.textContent = `${info.charge_uC.toFixed(1)} uC`;
      const input = document.createElement("input");
      input.type = "range";
      input.min = "-100";
      input.max = "100";
      input.step = "0.5";
      input.value = String(info.charge_uC);
      input.addEventListener("input", () => {
        const uc = parseFloat(input.value);
        this.session.dragGroupSlider(name, uc);
        value.textContent = `${uc.toFixed(1)} uC (pending)`;
      });
      row.appendChild(label);
      row.appendChild(input);
      row.appendChild(value);
      sliders.appendChild(row);
      this.sliderInputs.set(name, input);
      this.sliderLabels.set(name, value);
    }
    this.root.appendChild(sliders);

    const keyframeRow = document.createElement("div");
    keyframeRow.className = "row";
    const captureButton = document.createElement("button");
    captureButton.textContent = "capture keyframe";
    captureButton.addEventListener("click", () => {
      const t = this.session.captureKeyframe();
      if (t !== null) this.setStatus(`captured slider keyframe at t=${t.toFixed(2)} s`);
    });
    const exportButton = document.createElement("button");
    exportButton.textContent = "download tracks";
    exportButton.addEventListener("click", () => {
      const toml = this.session.exportTracksToml();
      if (!toml) {
        this.setStatus("no keyframes captured yet");
        return;
      }
      const blob = new Blob([toml], { type: "application/toml" });
      const link = document.createElement("a");
      link.href = URL.createObjectURL(blob);
      link.download = "charge_tracks.toml";
      link.click();
      URL.revokeObjectURL(link.href);
    });
    keyframeRow.appendChild(captureButton);
    keyframeRow.appendChild(exportButton);
    this.root.appendChild(keyframeRow);

    const chargeRow = document.createElement("div");
    chargeRow.className = "row";
    const chargeInput = document.createElement("input");
    chargeInput.type = "number";
    chargeInput.value = "-42";
    const addButton = document.createElement("button");
    addButton.textContent = "add external charge (uC)";
    addButton.addEventListener("click", () => {
      const uc = parseFloat(chargeInput.value);
      if (isFinite(uc)) this.hooks.onAddCharge(uc);
    });
    chargeRow.appendChild(chargeInput);
    chargeRow.appendChild(addButton);
    const hint = document.createElement("div");
    hint.className = "hint";
    hint.textContent = "drag spheres to move charges; shift-click a sphere to remove it";
    this.root.appendChild(chargeRow);
    this.root.appendChild(hint);

    this.statusLine.className = "status";
    this.toastLine.className = "toast hidden";
    this.root.appendChild(this.statusLine);
    this.root.appendChild(this.toastLine);
  }

  /** Called on every animation tick to reconcile DOM with session state. */
  refresh(): void {
    for (const [name, input] of this.sliderInputs) {
      const slider = this.session.sliders.get(name);
      const label = this.sliderLabels.get(name);
      if (!slider || !label) continue;
      const value = slider.local ?? slider.confirmed;
      if (document.activeElement !== input) {
        input.value = String(value);
      }
      label.textContent = `${value.toFixed(1)} uC${slider.pending ? " (pending)" : ""}`;
    }
    const frame = this.session.latestFrame;
    if (frame) {
      this.frameLine.textContent =
        `frame ${frame.frame}  t=${frame.time.toFixed(2)} s  ` +
        `E=${frame.energy.total.toExponential(3)} J  ` +
        (frame.playing ? "running" : "paused");
    }
    this.staleBadge.classList.toggle("hidden", !this.session.isStale());
  }

  setStatus(text: string): void {
    this.statusLine.textContent = text;
  }

  toast(text: string): void {
    this.toastLine.textContent = text;
    this.toastLine.classList.remove("hidden");
    if (this.toastTimer) clearTimeout(this.toastTimer);
    this.toastTimer = setTimeout(() => this.toastLine.classList.add("hidden"), 4000);
  }
}
