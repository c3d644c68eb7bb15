/**
 * Rig bundle loading: manifest validation, buffer decode, map dequantization.
 *
 * The bundle is a static directory produced by the export pipeline; all
 * blending happens client-side, so the viewer works from any static host.
 */
import { decodeGray16 } from "./png16.js";

export interface MapEntry {
  file: string;
  scale_mm: number;
  offset_mm: number;
  valid: string;
}

export interface BundleManifest {
  schema_version: number;
  vertex_count: number;
  face_count: number;
  blendshape_count: number;
  key_count: number;
  resolution: number;
  buffers: {
    neutral: string;
    faces: string;
    uvs: string | null;
    blendshapes: string[];
  };
  masks: { file: string; raw_max_mm: number }[];
  maps: MapEntry[];
  key_weights: string;
  mask_quantization: { scale: number; offset: number };
}

export interface DisplacementGrid {
  resolution: number;
  /** signed offsets (mm); invalid pixels are zero */
  values: Float32Array;
  valid: Uint8Array;
}

export interface BundleModel {
  manifest: BundleManifest;
  neutral: Float32Array; // V*3
  blendshapes: Float32Array[]; // J buffers of V*3
  faces: Uint32Array; // F*3
  uvs: Float32Array | null; // V*2
  activationMasks: Float32Array[]; // J grids of N*N in [0,1]
  maps: DisplacementGrid[]; // key_count+1 grids; index 0 = neutral
  keyWeights: number[][]; // K rows of J weights
}

/** Resolves a bundle-relative file name to its bytes. */
export type BundleReader = (name: string) => Promise<ArrayBuffer>;

export function fetchReader(baseUrl: string): BundleReader {
  const base = baseUrl.endsWith("/") ? baseUrl : baseUrl + "/";
  return async (name: string) => {
    const res = await fetch(base + name);
    if (!res.ok) throw new Error(`failed to fetch ${name}: ${res.status}`);
    return res.arrayBuffer();
  };
}

export async function loadBundle(read: BundleReader): Promise<BundleModel> {
  const manifest = JSON.parse(
    new TextDecoder().decode(await read("manifest.json")),
  ) as BundleManifest;
  if (manifest.schema_version !== 1) {
    throw new Error(`unsupported bundle schema ${manifest.schema_version}`);
  }
  const v = manifest.vertex_count;

  const neutral = new Float32Array(await read(manifest.buffers.neutral));
  if (neutral.length !== v * 3) {
    throw new Error(`neutral buffer has ${neutral.length} floats, expected ${v * 3}`);
  }
  const faces = new Uint32Array(await read(manifest.buffers.faces));
  if (faces.length !== manifest.face_count * 3) {
    throw new Error("face buffer length does not match manifest");
  }
  if (manifest.buffers.blendshapes.length !== manifest.blendshape_count) {
    throw new Error("blendshape list does not match manifest count");
  }
  const blendshapes: Float32Array[] = [];
  for (const name of manifest.buffers.blendshapes) {
    const buf = new Float32Array(await read(name));
    if (buf.length !== v * 3) throw new Error(`blendshape ${name} has wrong length`);
    blendshapes.push(buf);
  }
  let uvs: Float32Array | null = null;
  if (manifest.buffers.uvs) {
    uvs = new Float32Array(await read(manifest.buffers.uvs));
    if (uvs.length !== v * 2) throw new Error("uv buffer length does not match manifest");
  }

  const n = manifest.resolution;
  const activationMasks: Float32Array[] = [];
  for (const entry of manifest.masks) {
    const img = await decodeGray16(await read(entry.file));
    if (img.width !== n || img.height !== n) throw new Error("mask resolution mismatch");
    const q = manifest.mask_quantization;
    const mask = new Float32Array(n * n);
    for (let i = 0; i < mask.length; i++) mask[i] = img.data[i] * q.scale + q.offset;
    activationMasks.push(mask);
  }
  if (activationMasks.length !== manifest.blendshape_count) {
    throw new Error("mask count does not match blendshape count");
  }

  const maps: DisplacementGrid[] = [];
  for (const entry of manifest.maps) {
    const img = await decodeGray16(await read(entry.file));
    if (img.width !== n || img.height !== n) throw new Error("map resolution mismatch");
    const values = new Float32Array(n * n);
    const valid = new Uint8Array(n * n);
    for (let i = 0; i < values.length; i++) {
      const code = img.data[i];
      if (code > 0) {
        values[i] = (code - 1) * entry.scale_mm + entry.offset_mm;
        valid[i] = 1;
      }
    }
    maps.push({ resolution: n, values, valid });
  }
  if (maps.length !== manifest.key_count + 1) {
    throw new Error("map count does not match key count");
  }

  const keyWeights = JSON.parse(
    new TextDecoder().decode(await read(manifest.key_weights)),
  ) as number[][];
  if (keyWeights.length !== manifest.key_count) {
    throw new Error("key weight rows do not match key count");
  }
  for (const row of keyWeights) {
    if (row.length !== manifest.blendshape_count) {
      throw new Error("key weight row length does not match blendshape count");
    }
  }
  return { manifest, neutral, blendshapes, faces, uvs, activationMasks, maps, keyWeights };
}

export async function sha256Hex(data: ArrayBuffer | Uint8Array): Promise<string> {
  const buf = data instanceof Uint8Array
    ? data.buffer.slice(data.byteOffset, data.byteOffset + data.byteLength)
    : data;
  const digest = await crypto.subtle.digest("SHA-256", buf as ArrayBuffer);
  return Array.from(new Uint8Array(digest))
    .map((b) => b.toString(16).padStart(2, "0"))
    .join("");
}
