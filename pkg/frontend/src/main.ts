// Entry point: connect to the simulation service, render streamed frames,
// wire the control panel and external-charge dragging.

import * as THREE from "three";
import { OrbitControls } from "three/examples/jsm/controls/OrbitControls.js";

import { ControlPanel } from "./controls.js";
import { ExternalChargeView, MeshView } from "./render.js";
import { SceneInfo } from "./protocol.js";
import { ViewerSession } from "./session.js";

const params = new URLSearchParams(window.location.search);
const serverUrl = params.get("server") ?? "ws://127.0.0.1:8787/sim";

const canvasHost = document.getElementById("view") as HTMLElement;
const panelHost = document.getElementById("panel") as HTMLElement;

const renderer = new THREE.WebGLRenderer({ antialias: true });
renderer.setSize(canvasHost.clientWidth, canvasHost.clientHeight);
canvasHost.appendChild(renderer.domElement);

const scene3 = new THREE.Scene();
scene3.background = new THREE.Color(0x10141a);
const camera = new THREE.PerspectiveCamera(50, canvasHost.clientWidth / canvasHost.clientHeight, 0.01, 1e5);
const orbit = new OrbitControls(camera, renderer.domElement);

const meshView = new MeshView();
const chargeView = new ExternalChargeView();
scene3.add(meshView.root);
scene3.add(chargeView.root);

let socket: WebSocket | null = null;
let sceneScale = 1;

const session = new ViewerSession(
  (text) => {
    if (socket && socket.readyState === WebSocket.OPEN) socket.send(text);
    else throw new Error("socket not open");
  },
  {
    onScene: (scene: SceneInfo) => {
      meshView.setScene(scene);
      panel.build(scene);
      const lo = scene.bounds.lo;
      const hi = scene.bounds.hi;
      sceneScale = Math.max(hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]) || 1;
      const center = new THREE.Vector3((lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, (lo[2] + hi[2]) / 2);
      camera.position.copy(center.clone().add(new THREE.Vector3(0, -2.2 * sceneScale, 0.9 * sceneScale)));
      camera.up.set(0, 0, 1);
      orbit.target.copy(center);
      orbit.update();
    },
    onFrame: (frame, positions) => {
      meshView.applyFrame(frame, positions);
    },
    onStatus: (text) => panel.setStatus(text),
    onToast: (text) => panel.toast(text),
  },
);

const panel = new ControlPanel(panelHost, session, {
  onAddCharge: (chargeUC) => {
    // drop new charges on the near side of the mesh, towards the camera
    const target = orbit.target.clone();
    const towardCamera = camera.position.clone().sub(target).normalize().multiplyScalar(0.8 * sceneScale);
    const p = target.add(towardCamera);
    session.addExternalCharge([p.x, p.y, p.z], chargeUC);
  },
});

function connect(): void {
  socket = new WebSocket(serverUrl);
  session.connection = "connecting";
  socket.addEventListener("open", () => session.markOpen());
  socket.addEventListener("message", (event) => session.handleMessage(String(event.data)));
  socket.addEventListener("close", () => {
    session.markClosed();
    setTimeout(connect, 2000); // keep rendering the last frame; retry quietly
  });
  socket.addEventListener("error", () => socket?.close());
}
connect();

// -- external charge dragging -----------------------------------------------

const raycaster = new THREE.Raycaster();
const pointer = new THREE.Vector2();
let dragging: string | null = null;
const dragPlane = new THREE.Plane();

function pointerRay(event: PointerEvent): void {
  const rect = renderer.domElement.getBoundingClientRect();
  pointer.x = ((event.clientX - rect.left) / rect.width) * 2 - 1;
  pointer.y = -((event.clientY - rect.top) / rect.height) * 2 + 1;
  raycaster.setFromCamera(pointer, camera);
}

renderer.domElement.addEventListener("pointerdown", (event) => {
  pointerRay(event);
  const hits = raycaster.intersectObjects(chargeView.pickable(), false);
  if (hits.length === 0) return;
  const id = hits[0].object.userData.chargeId as string;
  if (event.shiftKey) {
    session.removeExternalCharge(id);
    return;
  }
  dragging = id;
  orbit.enabled = false;
  dragPlane.setFromNormalAndCoplanarPoint(
    camera.getWorldDirection(new THREE.Vector3()).negate(),
    hits[0].object.position,
  );
});

renderer.domElement.addEventListener("pointermove", (event) => {
  if (!dragging) return;
  pointerRay(event);
  const hit = new THREE.Vector3();
  if (raycaster.ray.intersectPlane(dragPlane, hit)) {
    session.dragExternalCharge(dragging, [hit.x, hit.y, hit.z]);
  }
});

window.addEventListener("pointerup", () => {
  dragging = null;
  orbit.enabled = true;
});

window.addEventListener("resize", () => {
  camera.aspect = canvasHost.clientWidth / canvasHost.clientHeight;
  camera.updateProjectionMatrix();
  renderer.setSize(canvasHost.clientWidth, canvasHost.clientHeight);
});

function animate(): void {
  requestAnimationFrame(animate);
  session.flush(); // coalesced controls: at most one message per control per tick
  chargeView.sync(session.externalCharges, sceneScale);
  panel.refresh();
  orbit.update();
  renderer.render(scene3, camera);
}
animate();
