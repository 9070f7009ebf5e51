import * as THREE from "three";
import { OBJLoader } from "three/examples/jsm/loaders/OBJLoader.js";
import { OrbitControls } from "three/examples/jsm/controls/OrbitControls.js";

/** Parse an OBJ string into meshes, preserving per-vertex colors. */
export function parseObj(text: string): THREE.Group {
  const group = new OBJLoader().parse(text);
  group.traverse((obj) => {
    const mesh = obj as THREE.Mesh;
    if (mesh.isMesh) {
      const hasColors = !!mesh.geometry.getAttribute("color");
      mesh.material = new THREE.MeshLambertMaterial({
        vertexColors: hasColors,
        color: hasColors ? 0xffffff : 0xb9c2cc,
        side: THREE.DoubleSide,
      });
    }
  });
  return group;
}

export function vertexCount(group: THREE.Group): number {
  let n = 0;
  group.traverse((obj) => {
    const mesh = obj as THREE.Mesh;
    if (mesh.isMesh) n += mesh.geometry.getAttribute("position").count;
  });
  return n;
}

/** Distinct vertex colors (building palette + ground), rounded to 2 decimals. */
export function distinctColorCount(group: THREE.Group): number {
  const seen = new Set<string>();
  group.traverse((obj) => {
    const mesh = obj as THREE.Mesh;
    if (!mesh.isMesh) return;
    const col = mesh.geometry.getAttribute("color");
    if (!col) return;
    for (let i = 0; i < col.count; i++) {
      seen.add(
        `${col.getX(i).toFixed(2)},${col.getY(i).toFixed(2)},${col.getZ(i).toFixed(2)}`,
      );
    }
  });
  return seen.size;
}

/** Orbitable viewer for reconstructed block meshes. */
export class MeshViewer {
  private scene = new THREE.Scene();
  private camera: THREE.PerspectiveCamera;
  private renderer: THREE.WebGLRenderer;
  private controls: OrbitControls;
  private mesh: THREE.Group | null = null;

  constructor(container: HTMLElement) {
    const w = container.clientWidth || 480;
    const h = container.clientHeight || 360;
    this.camera = new THREE.PerspectiveCamera(45, w / h, 0.1, 2000);
    this.renderer = new THREE.WebGLRenderer({ antialias: true });
    this.renderer.setSize(w, h);
    this.renderer.setClearColor(0xf4f6f8);
    container.appendChild(this.renderer.domElement);
    this.controls = new OrbitControls(this.camera, this.renderer.domElement);
    this.scene.add(new THREE.AmbientLight(0xffffff, 0.55));
    const sun = new THREE.DirectionalLight(0xffffff, 1.1);
    sun.position.set(80, -120, 160);
    this.scene.add(sun);
    this.camera.position.set(50, -110, 130);
    this.camera.up.set(0, 0, 1);
    this.controls.target.set(50, 50, 0);
    this.controls.update();
    const tick = () => {
      requestAnimationFrame(tick);
      this.controls.update();
      this.renderer.render(this.scene, this.camera);
    };
    tick();
  }

  setMeshFromObj(text: string) {
    if (this.mesh) this.scene.remove(this.mesh);
    this.mesh = parseObj(text);
    this.scene.add(this.mesh);
    const box = new THREE.Box3().setFromObject(this.mesh);
    const center = box.getCenter(new THREE.Vector3());
    this.controls.target.copy(center);
    this.controls.update();
  }
}
