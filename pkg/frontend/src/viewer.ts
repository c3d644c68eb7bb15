/**
 * three.js viewer: posed rig mesh with detail shading, per-blendshape
 * sliders, key-expression presets and a live weight-mask heatmap.
 *
 * The blended displacement map drives a normal map (and optionally true
 * vertex displacement); recomputing it is cheap enough to run on input.
 */
import * as THREE from "three";
import { OrbitControls } from "three/examples/jsm/controls/OrbitControls.js";

import type { BundleModel } from "./bundle.js";
import { evaluateRig, type RigEvaluation } from "./rig.js";

export interface ViewerOptions {
  canvas: HTMLCanvasElement;
  heatmap: HTMLCanvasElement;
  displaceGeometry?: boolean;
}

export class RigViewer {
  readonly model: BundleModel;
  alpha: number[];
  displaceGeometry: boolean;
  wireframe = false;

  private renderer: THREE.WebGLRenderer;
  private scene: THREE.Scene;
  private camera: THREE.PerspectiveCamera;
  private controls: OrbitControls;
  private mesh: THREE.Mesh;
  private material: THREE.MeshStandardMaterial;
  private normalTexture: THREE.DataTexture;
  private heatmapCtx: CanvasRenderingContext2D;
  private basePositions: Float32Array;
  private onChangeHooks: ((ev: RigEvaluation) => void)[] = [];

  constructor(model: BundleModel, opts: ViewerOptions) {
    this.model = model;
    this.alpha = new Array(model.manifest.blendshape_count).fill(0);
    this.displaceGeometry = opts.displaceGeometry ?? false;

    this.renderer = new THREE.WebGLRenderer({ canvas: opts.canvas, antialias: true });
    this.renderer.setSize(opts.canvas.clientWidth, opts.canvas.clientHeight, false);
    this.scene = new THREE.Scene();
    this.scene.background = new THREE.Color(0x16181d);
    this.camera = new THREE.PerspectiveCamera(
      40, opts.canvas.clientWidth / opts.canvas.clientHeight, 1.0, 5000,
    );

    const geometry = new THREE.BufferGeometry();
    this.basePositions = new Float32Array(model.neutral);
    geometry.setAttribute("position", new THREE.BufferAttribute(this.basePositions, 3));
    geometry.setIndex(new THREE.BufferAttribute(model.faces, 1));
    if (model.uvs) geometry.setAttribute("uv", new THREE.BufferAttribute(model.uvs, 2));
    geometry.computeVertexNormals();

    const n = model.manifest.resolution;
    this.normalTexture = new THREE.DataTexture(
      new Uint8Array(n * n * 4), n, n, THREE.RGBAFormat,
    );
    this.normalTexture.needsUpdate = true;

    this.material = new THREE.MeshStandardMaterial({
      color: 0xd8b59a,
      roughness: 0.75,
      metalness: 0.0,
      normalMap: model.uvs ? this.normalTexture : null,
      normalScale: new THREE.Vector2(1.0, 1.0),
    });
    this.mesh = new THREE.Mesh(geometry, this.material);
    this.scene.add(this.mesh);

    const key = new THREE.DirectionalLight(0xffffff, 2.2);
    key.position.set(0.4, 0.5, 1.0);
    this.scene.add(key);
    this.scene.add(new THREE.AmbientLight(0xffffff, 0.55));

    const box = new THREE.Box3().setFromObject(this.mesh);
    const center = box.getCenter(new THREE.Vector3());
    const size = box.getSize(new THREE.Vector3()).length();
    this.camera.position.copy(center).add(new THREE.Vector3(0, 0, size * 1.4));
    this.controls = new OrbitControls(this.camera, opts.canvas);
    this.controls.target.copy(center);

    const ctx = opts.heatmap.getContext("2d");
    if (!ctx) throw new Error("heatmap canvas has no 2d context");
    this.heatmapCtx = ctx;

    this.update();
    this.renderer.setAnimationLoop(() => {
      this.controls.update();
      this.renderer.render(this.scene, this.camera);
    });
  }

  onChange(fn: (ev: RigEvaluation) => void): void {
    this.onChangeHooks.push(fn);
  }

  setAlpha(index: number, value: number): void {
    this.alpha[index] = Math.min(1, Math.max(0, value));
    this.update();
  }

  setPreset(alpha: number[]): void {
    this.alpha = alpha.map((a) => Math.min(1, Math.max(0, a)));
    this.update();
  }

  setWireframe(on: boolean): void {
    this.wireframe = on;
    this.material.wireframe = on;
  }

  setDisplaceGeometry(on: boolean): void {
    this.displaceGeometry = on;
    this.update();
  }

  /** Re-evaluate the rig and push results into GPU buffers and the heatmap. */
  update(): RigEvaluation {
    const ev = evaluateRig(this.model, this.alpha);
    const geo = this.mesh.geometry;
    const pos = geo.getAttribute("position") as THREE.BufferAttribute;
    (pos.array as Float32Array).set(ev.vertices);
    geo.computeVertexNormals();

    if (this.displaceGeometry && this.model.uvs) {
      this.applyVertexDisplacement(ev, pos.array as Float32Array);
      geo.computeVertexNormals();
    }
    pos.needsUpdate = true;
    geo.computeBoundingSphere();

    if (this.model.uvs) this.updateNormalMap(ev);
    this.drawHeatmap(ev);
    for (const fn of this.onChangeHooks) fn(ev);
    return ev;
  }

  private applyVertexDisplacement(ev: RigEvaluation, positions: Float32Array): void {
    const uvs = this.model.uvs!;
    const n = this.model.manifest.resolution;
    const normals = this.mesh.geometry.getAttribute("normal") as THREE.BufferAttribute;
    const v = positions.length / 3;
    for (let i = 0; i < v; i++) {
      const px = Math.min(n - 1, Math.max(0, Math.round(uvs[2 * i] * n - 0.5)));
      const py = Math.min(n - 1, Math.max(0, Math.round(uvs[2 * i + 1] * n - 0.5)));
      const d = ev.blendedMap[py * n + px];
      positions[3 * i] += d * normals.getX(i);
      positions[3 * i + 1] += d * normals.getY(i);
      positions[3 * i + 2] += d * normals.getZ(i);
    }
  }

  private updateNormalMap(ev: RigEvaluation): void {
    const n = this.model.manifest.resolution;
    const rgba = this.normalTexture.image.data as Uint8Array;
    // tangent-space normals from map gradients; one texel = ~face_mm/n
    const strength = n / 40.0;
    for (let y = 0; y < n; y++) {
      for (let x = 0; x < n; x++) {
        const i = y * n + x;
        const xm = ev.blendedMap[y * n + Math.max(0, x - 1)];
        const xp = ev.blendedMap[y * n + Math.min(n - 1, x + 1)];
        const ym = ev.blendedMap[Math.max(0, y - 1) * n + x];
        const yp = ev.blendedMap[Math.min(n - 1, y + 1) * n + x];
        const gx = (xp - xm) * 0.5 * strength;
        const gy = (yp - ym) * 0.5 * strength;
        const inv = 1.0 / Math.sqrt(gx * gx + gy * gy + 1.0);
        rgba[4 * i] = Math.round((-gx * inv * 0.5 + 0.5) * 255);
        rgba[4 * i + 1] = Math.round((-gy * inv * 0.5 + 0.5) * 255);
        rgba[4 * i + 2] = Math.round((inv * 0.5 + 0.5) * 255);
        rgba[4 * i + 3] = 255;
      }
    }
    this.normalTexture.needsUpdate = true;
  }

  private drawHeatmap(ev: RigEvaluation): void {
    const n = this.model.manifest.resolution;
    const canvas = this.heatmapCtx.canvas;
    const img = this.heatmapCtx.createImageData(n, n);
    const k = ev.weightMasks.mi.length;
    for (let p = 0; p < n * n; p++) {
      // neutral share in blue, key shares split across red/green
      let r = 0;
      let g = 0;
      for (let i = 0; i < k; i++) {
        const w = ev.weightMasks.mi[i][p];
        if (i % 2 === 0) r += w;
        else g += w;
      }
      img.data[4 * p] = Math.min(255, r * 255);
      img.data[4 * p + 1] = Math.min(255, g * 255);
      img.data[4 * p + 2] = Math.min(255, ev.weightMasks.m0[p] * 255);
      img.data[4 * p + 3] = 255;
    }
    canvas.width = n;
    canvas.height = n;
    this.heatmapCtx.putImageData(img, 0, 0);
  }
}
