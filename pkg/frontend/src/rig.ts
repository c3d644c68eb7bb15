/**
 * Client-side rig evaluation, mirroring the exporter's math:
 *   M_i = clamp01( sum_j alpha_j * keyWeight_i[j] * A_j )
 *   M_0 = max(0, 1 - sum_i M_i)
 *   F   = M_0 * F_0 + sum_i M_i * F_i      (invalid map pixels contribute 0)
 *   base = neutral + sum_j alpha_j * (B_j - neutral)
 */
import type { BundleModel, DisplacementGrid } from "./bundle.js";

export interface WeightMasks {
  m0: Float32Array;
  mi: Float32Array[];
}

export interface RigEvaluation {
  vertices: Float32Array; // V*3 posed base positions
  blendedMap: Float32Array; // N*N offsets, invalid pixels zero
  blendedValid: Uint8Array;
  weightMasks: WeightMasks;
}

export function computeWeightMasks(model: BundleModel, alpha: number[]): WeightMasks {
  const j = model.manifest.blendshape_count;
  if (alpha.length !== j) throw new Error(`alpha length ${alpha.length}, expected ${j}`);
  const n2 = model.manifest.resolution ** 2;
  const mi: Float32Array[] = [];
  const sum = new Float64Array(n2);
  for (let i = 0; i < model.manifest.key_count; i++) {
    const out = new Float32Array(n2);
    const coeff: number[] = [];
    for (let k = 0; k < j; k++) coeff.push(alpha[k] * model.keyWeights[i][k]);
    for (let p = 0; p < n2; p++) {
      let acc = 0;
      for (let k = 0; k < j; k++) acc += coeff[k] * model.activationMasks[k][p];
      const clamped = acc < 0 ? 0 : acc > 1 ? 1 : acc;
      out[p] = clamped;
      sum[p] += clamped;
    }
    mi.push(out);
  }
  const m0 = new Float32Array(n2);
  for (let p = 0; p < n2; p++) {
    const rest = 1 - sum[p];
    m0[p] = rest > 0 ? rest : 0;
  }
  return { m0, mi };
}

export function blendDisplacement(
  maps: DisplacementGrid[],
  masks: WeightMasks,
): { values: Float32Array; valid: Uint8Array } {
  const n2 = masks.m0.length;
  const values = new Float32Array(n2);
  const valid = new Uint8Array(n2);
  const neutral = maps[0];
  for (let p = 0; p < n2; p++) {
    let acc = masks.m0[p] * (neutral.valid[p] ? neutral.values[p] : 0);
    let anyValid = masks.m0[p] > 0 && neutral.valid[p] === 1;
    let anyContrib = masks.m0[p] > 0;
    for (let i = 0; i < masks.mi.length; i++) {
      const w = masks.mi[i][p];
      const map = maps[i + 1];
      acc += w * (map.valid[p] ? map.values[p] : 0);
      if (w > 0) {
        anyContrib = true;
        if (map.valid[p]) anyValid = true;
      }
    }
    values[p] = acc;
    valid[p] = anyContrib && anyValid ? 1 : 0;
  }
  return { values, valid };
}

export function blendVertices(model: BundleModel, alpha: number[]): Float32Array {
  const out = new Float32Array(model.neutral);
  for (let j = 0; j < alpha.length; j++) {
    const a = alpha[j];
    if (a === 0) continue;
    const shape = model.blendshapes[j];
    for (let i = 0; i < out.length; i++) out[i] += a * (shape[i] - model.neutral[i]);
  }
  return out;
}

export function evaluateRig(model: BundleModel, alpha: number[]): RigEvaluation {
  const masks = computeWeightMasks(model, alpha);
  const blended = blendDisplacement(model.maps, masks);
  return {
    vertices: blendVertices(model, alpha),
    blendedMap: blended.values,
    blendedValid: blended.valid,
    weightMasks: masks,
  };
}

// ---------------------------------------------------------------------------
// Conformance digests (shared with the exporter's test vectors)

export interface SummaryVector {
  count: number;
  mean: number;
  abs_mean: number;
  rms: number;
  min: number;
  max: number;
  samples: number[];
}

export function summaryVector(arr: ArrayLike<number>, samples = 64): SummaryVector {
  const n = arr.length;
  let sum = 0;
  let absSum = 0;
  let sq = 0;
  let lo = Infinity;
  let hi = -Infinity;
  for (let i = 0; i < n; i++) {
    const x = arr[i];
    sum += x;
    absSum += Math.abs(x);
    sq += x * x;
    if (x < lo) lo = x;
    if (x > hi) hi = x;
  }
  const stride = Math.max(1, Math.floor(n / samples));
  const picked: number[] = [];
  for (let i = 0; i < n && picked.length < samples; i += stride) picked.push(arr[i]);
  return {
    count: n,
    mean: sum / n,
    abs_mean: absSum / n,
    rms: Math.sqrt(sq / n),
    min: lo,
    max: hi,
    samples: picked,
  };
}

/** Largest entry-wise deviation between two digests of the same array shape. */
export function digestDeviation(a: SummaryVector, b: SummaryVector): number {
  if (a.count !== b.count || a.samples.length !== b.samples.length) return Infinity;
  let worst = Math.max(
    Math.abs(a.mean - b.mean),
    Math.abs(a.abs_mean - b.abs_mean),
    Math.abs(a.rms - b.rms),
    Math.abs(a.min - b.min),
    Math.abs(a.max - b.max),
  );
  for (let i = 0; i < a.samples.length; i++) {
    worst = Math.max(worst, Math.abs(a.samples[i] - b.samples[i]));
  }
  return worst;
}
