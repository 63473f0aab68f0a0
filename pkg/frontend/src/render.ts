// Three.js scene graph for streamed frames: vertices as points colored by
// charge, springs as line segments, external charges as draggable spheres.
// The geometry update path is kept allocation-free per frame.

import * as THREE from "three";

import { chargeColor, perVertexCharges } from "./colormap.js";
import { FrameMessage, SceneInfo } from "./protocol.js";

export class MeshView {
  readonly root = new THREE.Group();
  private points: THREE.Points | null = null;
  private lines: THREE.LineSegments | null = null;
  private positionAttr: THREE.BufferAttribute | null = null;
  private colorAttr: THREE.BufferAttribute | null = null;
  private lineAttr: THREE.BufferAttribute | null = null;
  private edges: [number, number][] = [];
  private groups: SceneInfo["groups"] = {};
  private n = 0;
  private maxAbsUC = 1;

  setScene(scene: SceneInfo): void {
    this.clear();
    this.n = scene.n;
    this.edges = scene.edges;
    this.groups = scene.groups;
    const base = perVertexCharges(scene.n, scene.groups, null);
    this.maxAbsUC = Math.max(1e-9, ...Array.from(base, Math.abs));

    const positions = new Float32Array(3 * scene.n);
    const colors = new Float32Array(3 * scene.n);
    const geometry = new THREE.BufferGeometry();
    this.positionAttr = new THREE.BufferAttribute(positions, 3);
    this.colorAttr = new THREE.BufferAttribute(colors, 3);
    geometry.setAttribute("position", this.positionAttr);
    geometry.setAttribute("color", this.colorAttr);
    const extent = Math.max(
      scene.bounds.hi[0] - scene.bounds.lo[0],
      scene.bounds.hi[1] - scene.bounds.lo[1],
      scene.bounds.hi[2] - scene.bounds.lo[2],
    );
    this.points = new THREE.Points(
      geometry,
      new THREE.PointsMaterial({ size: 0.02 * extent, vertexColors: true }),
    );
    this.points.frustumCulled = false;
    this.root.add(this.points);

    const lineGeometry = new THREE.BufferGeometry();
    this.lineAttr = new THREE.BufferAttribute(new Float32Array(6 * scene.edges.length), 3);
    lineGeometry.setAttribute("position", this.lineAttr);
    this.lines = new THREE.LineSegments(
      lineGeometry,
      new THREE.LineBasicMaterial({ color: 0x667788, transparent: true, opacity: 0.5 }),
    );
    this.lines.frustumCulled = false;
    this.root.add(this.lines);
  }

  /** Apply one streamed frame; returns false when no scene is loaded yet. */
  applyFrame(frame: FrameMessage, positions: Float64Array): boolean {
    if (!this.positionAttr || !this.colorAttr || !this.lineAttr || frame.n !== this.n) {
      return false;
    }
    const target = this.positionAttr.array as Float32Array;
    for (let i = 0; i < positions.length; i++) target[i] = positions[i];
    this.positionAttr.needsUpdate = true;

    const charges = perVertexCharges(this.n, this.groups, frame.group_charges);
    let maxAbs = this.maxAbsUC;
    for (let i = 0; i < this.n; i++) maxAbs = Math.max(maxAbs, Math.abs(charges[i]));
    this.maxAbsUC = maxAbs;
    const colors = this.colorAttr.array as Float32Array;
    for (let i = 0; i < this.n; i++) {
      const [r, g, b] = chargeColor(charges[i], maxAbs);
      colors[3 * i] = r;
      colors[3 * i + 1] = g;
      colors[3 * i + 2] = b;
    }
    this.colorAttr.needsUpdate = true;

    const lines = this.lineAttr.array as Float32Array;
    for (let e = 0; e < this.edges.length; e++) {
      const [a, b] = this.edges[e];
      for (let d = 0; d < 3; d++) {
        lines[6 * e + d] = positions[3 * a + d];
        lines[6 * e + 3 + d] = positions[3 * b + d];
      }
    }
    this.lineAttr.needsUpdate = true;
    return true;
  }

  currentPositions(): Float32Array | null {
    return this.positionAttr ? (this.positionAttr.array as Float32Array) : null;
  }

  private clear(): void {
    for (const child of [...this.root.children]) this.root.remove(child);
    this.points = null;
    this.lines = null;
    this.positionAttr = null;
    this.colorAttr = null;
    this.lineAttr = null;
  }
}

export class ExternalChargeView {
  readonly root = new THREE.Group();
  private spheres = new Map<string, THREE.Mesh>();

  sync(chargeStates: Map<string, { position: [number, number, number]; chargeUC: number }>, scale: number): void {
    for (const [id, mesh] of this.spheres) {
      if (!chargeStates.has(id)) {
        this.root.remove(mesh);
        this.spheres.delete(id);
      }
    }
    for (const [id, state] of chargeStates) {
      let mesh = this.spheres.get(id);
      if (!mesh) {
        mesh = new THREE.Mesh(
          new THREE.SphereGeometry(0.03 * scale, 16, 12),
          new THREE.MeshBasicMaterial(),
        );
        mesh.userData.chargeId = id;
        this.spheres.set(id, mesh);
        this.root.add(mesh);
      }
      mesh.position.set(state.position[0], state.position[1], state.position[2]);
      const [r, g, b] = chargeColor(state.chargeUC, Math.max(1e-9, Math.abs(state.chargeUC)));
      (mesh.material as THREE.MeshBasicMaterial).color.setRGB(r, g, b);
    }
  }

  pickable(): THREE.Object3D[] {
    return [...this.spheres.values()];
  }
}
