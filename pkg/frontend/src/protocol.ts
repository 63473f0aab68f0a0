// Wire types and codecs for the simulation service (see ../../PROTOCOL.md).
// Every message is one JSON object per websocket text frame; positions travel
// as base64-packed little-endian float64, vertex-major.

export const PROTOCOL_VERSION = 1;

export interface GroupInfo {
  indices: number[];
  charge_uC: number;
}

export interface ExternalChargeInfo {
  id: string;
  position: [number, number, number];
  charge_uC: number;
}

export interface SceneInfo {
  name: string;
  n: number;
  h: number;
  integrator: string;
  edges: [number, number][];
  groups: Record<string, GroupInfo>;
  pinned: number[];
  external_charges: ExternalChargeInfo[];
  bounds: { lo: [number, number, number]; hi: [number, number, number] };
  throttle: number;
}

export interface HelloMessage {
  type: "hello";
  protocol: number;
  scene: SceneInfo;
}

export interface SceneMessage {
  type: "scene";
  scene: SceneInfo;
}

export interface EnergyInfo {
  kinetic: number;
  elastic: number;
  coulomb: number;
  external_potential: number;
  total: number;
}

export interface FrameMessage {
  type: "frame";
  frame: number;
  time: number;
  n: number;
  h: number;
  positions: string;
  group_charges: Record<string, number>;
  energy: EnergyInfo;
  playing: boolean;
}

export interface AckMessage {
  type: "ack";
  seq: number | null;
  applied_before_frame: number;
  id?: string;
}

export interface ErrorMessage {
  type: "error";
  message: string;
  seq: number | null;
}

export type ServerMessage = HelloMessage | SceneMessage | FrameMessage | AckMessage | ErrorMessage;

export type ControlKind =
  | "set_group_charge"
  | "add_external_charge"
  | "move_external_charge"
  | "remove_external_charge"
  | "set_timestep"
  | "play"
  | "pause"
  | "reset"
  | "load_scene";

export interface ControlMessage {
  type: "control";
  kind: ControlKind;
  seq: number;
  [key: string]: unknown;
}

export function decodePositions(b64: string): Float64Array {
  // atob exists in browsers and in node >= 16
  const raw = atob(b64);
  const bytes = new Uint8Array(raw.length);
  for (let i = 0; i < raw.length; i++) bytes[i] = raw.charCodeAt(i);
  return new Float64Array(bytes.buffer, 0, bytes.length / 8);
}

export function parseServerMessage(text: string): ServerMessage {
  let parsed: unknown;
  try {
    parsed = JSON.parse(text);
  } catch {
    throw new Error("malformed server message: not JSON");
  }
  const msg = parsed as { type?: string };
  switch (msg.type) {
    case "hello":
    case "scene":
    case "frame":
    case "ack":
    case "error":
      return parsed as ServerMessage;
    default:
      throw new Error(`malformed server message: unknown type '${msg.type}'`);
  }
}

export function validateFrame(frame: FrameMessage, expectedN: number | null): string | null {
  if (typeof frame.frame !== "number" || typeof frame.positions !== "string") {
    return "frame is missing fields";
  }
  if (expectedN !== null && frame.n !== expectedN) {
    return `frame carries n=${frame.n}, scene has n=${expectedN}`;
  }
  const decoded = decodePositions(frame.positions);
  if (decoded.length !== 3 * frame.n) {
    return `frame payload has ${decoded.length} values, expected ${3 * frame.n}`;
  }
  return null;
}

let seqCounter = 0;
export function nextSeq(): number {
  seqCounter += 1;
  return seqCounter;
}

export const controls = {
  setGroupCharge(group: string, chargeUC: number): ControlMessage {
    return { type: "control", kind: "set_group_charge", group, charge_uC: chargeUC, seq: nextSeq() };
  },
  addExternalCharge(id: string, position: [number, number, number], chargeUC: number): ControlMessage {
    return { type: "control", kind: "add_external_charge", id, position, charge_uC: chargeUC, seq: nextSeq() };
  },
  moveExternalCharge(id: string, position: [number, number, number]): ControlMessage {
    return { type: "control", kind: "move_external_charge", id, position, seq: nextSeq() };
  },
  removeExternalCharge(id: string): ControlMessage {
    return { type: "control", kind: "remove_external_charge", id, seq: nextSeq() };
  },
  setTimestep(h: number): ControlMessage {
    return { type: "control", kind: "set_timestep", h, seq: nextSeq() };
  },
  play(): ControlMessage {
    return { type: "control", kind: "play", seq: nextSeq() };
  },
  pause(): ControlMessage {
    return { type: "control", kind: "pause", seq: nextSeq() };
  },
  reset(): ControlMessage {
    return { type: "control", kind: "reset", seq: nextSeq() };
  },
};
