// Client-side session state machine: connection status, latest frame, slider
// reconciliation, external charge bookkeeping, staleness. Pure logic; the
// socket and the DOM are injected, so everything here is unit-testable.

import {
  ControlMessage,
  FrameMessage,
  SceneInfo,
  ServerMessage,
  controls,
  decodePositions,
  parseServerMessage,
  validateFrame,
} from "./protocol.js";

export type ConnectionState = "connecting" | "open" | "closed";

export interface SliderState {
  confirmed: number; // last server-acknowledged value, uC
  local: number | null; // pending local edit, uC
  pending: boolean;
}

export interface ExternalChargeState {
  position: [number, number, number];
  chargeUC: number;
  pending: boolean;
}

export interface SessionEvents {
  onScene?: (scene: SceneInfo) => void;
  onFrame?: (frame: FrameMessage, positions: Float64Array) => void;
  onStatus?: (text: string) => void;
  onToast?: (text: string) => void;
}

interface PendingControl {
  kind?: string;
  onAck?: (ack: { applied_before_frame: number; id?: string }) => void;
  onError?: () => void;
}

export const STALE_AFTER_MS = 1500;

export class ViewerSession {
  connection: ConnectionState = "connecting";
  scene: SceneInfo | null = null;
  latestFrame: FrameMessage | null = null;
  latestPositions: Float64Array | null = null;
  lastFrameAtMs = 0;
  framesSeen = 0;
  playing = true;
  sliders = new Map<string, SliderState>();
  externalCharges = new Map<string, ExternalChargeState>();

  private send: (text: string) => void;
  private events: SessionEvents;
  private now: () => number;
  private pending = new Map<number, PendingControl>();
  private queuedSliderEdits = new Map<string, number>();
  private queuedChargeMoves = new Map<string, [number, number, number]>();
  private localChargeCounter = 0;

  constructor(send: (text: string) => void, events: SessionEvents = {}, now: () => number = () => Date.now()) {
    this.send = send;
    this.events = events;
    this.now = now;
  }

  // -- socket lifecycle ------------------------------------------------------

  markOpen(): void {
    this.connection = "open";
  }

  markClosed(): void {
    this.connection = "closed";
    this.events.onStatus?.("disconnected; showing last received frame");
  }

  isStale(nowMs?: number): boolean {
    if (this.connection !== "open") return this.latestFrame !== null || this.connection === "closed";
    if (!this.playing) return false;
    if (this.lastFrameAtMs === 0) return false;
    return (nowMs ?? this.now()) - this.lastFrameAtMs > STALE_AFTER_MS;
  }

  // -- inbound ---------------------------------------------------------------

  handleMessage(text: string): void {
    let msg: ServerMessage;
    try {
      msg = parseServerMessage(text);
    } catch (err) {
      this.events.onStatus?.(String(err instanceof Error ? err.message : err));
      return;
    }
    switch (msg.type) {
      case "hello":
        if (msg.protocol !== 1) {
          this.events.onStatus?.(`server speaks protocol ${msg.protocol}, expected 1`);
          return;
        }
        this.applyScene(msg.scene);
        break;
      case "scene":
        this.applyScene(msg.scene);
        break;
      case "frame":
        this.applyFrame(msg);
        break;
      case "ack": {
        const entry = msg.seq !== null ? this.pending.get(msg.seq) : undefined;
        if (entry && msg.seq !== null) {
          this.pending.delete(msg.seq);
          entry.onAck?.(msg);
        }
        break;
      }
      case "error": {
        const entry = msg.seq !== null ? this.pending.get(msg.seq as number) : undefined;
        if (entry && msg.seq !== null) {
          this.pending.delete(msg.seq as number);
          entry.onError?.();
        }
        this.events.onToast?.(msg.message);
        break;
      }
    }
  }

  private applyScene(scene: SceneInfo): void {
    this.scene = scene;
    this.latestFrame = null;
    this.latestPositions = null;
    this.framesSeen = 0;
    this.sliders.clear();
    this.queuedSliderEdits.clear();
    for (const [name, info] of Object.entries(scene.groups)) {
      this.sliders.set(name, { confirmed: info.charge_uC, local: null, pending: false });
    }
    this.externalCharges.clear();
    for (const ext of scene.external_charges) {
      this.externalCharges.set(ext.id, {
        position: [...ext.position] as [number, number, number],
        chargeUC: ext.charge_uC,
        pending: false,
      });
    }
    this.events.onScene?.(scene);
  }

  private applyFrame(frame: FrameMessage): void {
    const problem = validateFrame(frame, this.scene ? this.scene.n : null);
    if (problem !== null) {
      this.events.onStatus?.(problem); // view stays on the previous frame
      return;
    }
    if (this.latestFrame && frame.frame < this.latestFrame.frame) {
      return; // never step the view backwards
    }
    this.latestFrame = frame;
    this.latestPositions = decodePositions(frame.positions);
    this.lastFrameAtMs = this.now();
    this.framesSeen += 1;
    this.playing = frame.playing;
    // server-side charge values (keyframe tracks) move unpinned sliders
    for (const [name, value] of Object.entries(frame.group_charges)) {
      const slider = this.sliders.get(name);
      if (slider && !slider.pending) slider.confirmed = value;
    }
    this.events.onFrame?.(frame, this.latestPositions);
  }

  // -- outbound --------------------------------------------------------------

  sliderValue(group: string): number {
    const slider = this.sliders.get(group);
    if (!slider) return 0;
    return slider.local ?? slider.confirmed;
  }

  dragGroupSlider(group: string, valueUC: number): void {
    const slider = this.sliders.get(group);
    if (!slider) return;
    slider.local = valueUC;
    slider.pending = true;
    this.queuedSliderEdits.set(group, valueUC); // coalesced until the next flush
  }

  addExternalCharge(position: [number, number, number], chargeUC: number): string {
    this.localChargeCounter += 1;
    const id = `ui${this.localChargeCounter}`;
    this.externalCharges.set(id, { position: [...position] as [number, number, number], chargeUC, pending: true });
    this.dispatch(controls.addExternalCharge(id, position, chargeUC), {
      onAck: () => {
        const state = this.externalCharges.get(id);
        if (state) state.pending = false;
      },
      onError: () => {
        this.externalCharges.delete(id);
      },
    });
    return id;
  }

  dragExternalCharge(id: string, position: [number, number, number]): void {
    const state = this.externalCharges.get(id);
    if (!state) return;
    state.position = [...position] as [number, number, number];
    this.queuedChargeMoves.set(id, state.position);
  }

  removeExternalCharge(id: string): void {
    const state = this.externalCharges.get(id);
    if (!state) return;
    this.externalCharges.delete(id);
    this.queuedChargeMoves.delete(id);
    this.dispatch(controls.removeExternalCharge(id), {
      onError: () => {
        this.externalCharges.set(id, state);
      },
    });
  }

  play(): void {
    this.dispatch(controls.play(), { onAck: () => (this.playing = true) });
  }

  pause(): void {
    this.dispatch(controls.pause(), { onAck: () => (this.playing = false) });
  }

  reset(): void {
    this.dispatch(controls.reset());
  }

  setTimestep(h: number): void {
    this.dispatch(controls.setTimestep(h));
  }

  /** Send coalesced edits: at most one message per group / charge per tick. */
  flush(): void {
    for (const [group, value] of this.queuedSliderEdits) {
      const slider = this.sliders.get(group);
      const before = slider ? slider.confirmed : 0;
      this.dispatch(controls.setGroupCharge(group, value), {
        onAck: () => {
          if (!slider) return;
          slider.confirmed = value;
          if (slider.local === value) {
            slider.local = null;
            slider.pending = false;
          }
        },
        onError: () => {
          if (!slider) return;
          slider.local = null;
          slider.pending = false;
          slider.confirmed = before; // snap back
        },
      });
    }
    this.queuedSliderEdits.clear();
    for (const [id, position] of this.queuedChargeMoves) {
      this.dispatch(controls.moveExternalCharge(id, position));
    }
    this.queuedChargeMoves.clear();
  }

  pendingControlCount(): number {
    return this.pending.size;
  }

  // -- keyframe capture --------------------------------------------------------

  /** (time, uC) keyframes captured per group; exportable as config tracks. */
  capturedTracks = new Map<string, [number, number][]>();

  captureKeyframe(): number | null {
    if (!this.latestFrame) return null;
    const t = this.latestFrame.time;
    for (const [group] of this.sliders) {
      const track = this.capturedTracks.get(group) ?? [];
      const value = this.sliderValue(group);
      if (track.length && track[track.length - 1][0] >= t) {
        track[track.length - 1] = [t, value]; // keep keyframe times strictly increasing
      } else {
        track.push([t, value]);
      }
      this.capturedTracks.set(group, track);
    }
    return t;
  }

  /** Captured tracks as scene-config TOML, ready to paste into a scene file. */
  exportTracksToml(): string {
    const chunks: string[] = [];
    for (const [group, keys] of this.capturedTracks) {
      if (keys.length === 0) continue;
      const rows = keys.map(([t, v]) => `[${t}, ${v}]`).join(", ");
      chunks.push(`[[charge_tracks]]\ngroup = "${group}"\nkeys = [${rows}]\n`);
    }
    return chunks.join("\n");
  }

  private dispatch(message: ControlMessage, hooks: PendingControl = {}): void {
    this.pending.set(message.seq, { ...hooks, kind: message.kind });
    try {
      this.send(JSON.stringify(message));
    } catch {
      this.pending.delete(message.seq);
      this.events.onStatus?.("send failed; connection lost?");
    }
  }
}
