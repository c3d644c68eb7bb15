import { describe, expect, it } from "vitest";

import { loadBundle, sha256Hex } from "../src/bundle.js";
import { decodeGray16 } from "../src/png16.js";
import { FIXTURE_DIR, fixtureJson, fixtureReader } from "./helpers.js";

interface ConformanceDoc {
  neutral_sha256: string;
  tolerance: number;
  cases: {
    alpha: number[];
    blended_map: Record<string, unknown>;
    vertices: Record<string, unknown>;
  }[];
}

describe("bundle loading", () => {
  it("loads the fixture bundle with matching counts", async () => {
    const model = await loadBundle(fixtureReader());
    expect(model.neutral.length).toBe(model.manifest.vertex_count * 3);
    expect(model.blendshapes.length).toBe(model.manifest.blendshape_count);
    expect(model.activationMasks.length).toBe(model.manifest.blendshape_count);
    expect(model.maps.length).toBe(model.manifest.key_count + 1);
    expect(model.keyWeights.length).toBe(model.manifest.key_count);
    // slider count == blendshape count is what the UI builds from
    expect(model.manifest.blendshape_count).toBeGreaterThan(0);
  });

  it("decoded neutral buffer matches the conformance checksum", async () => {
    const model = await loadBundle(fixtureReader());
    const doc = await fixtureJson<ConformanceDoc>("conformance.json");
    const bytes = new Uint8Array(
      model.neutral.buffer, model.neutral.byteOffset, model.neutral.byteLength,
    );
    expect(await sha256Hex(bytes)).toBe(doc.neutral_sha256);
  });

  it("masks are normalized to [0, 1]", async () => {
    const model = await loadBundle(fixtureReader());
    for (const mask of model.activationMasks) {
      let lo = Infinity;
      let hi = -Infinity;
      for (const v of mask) {
        lo = Math.min(lo, v);
        hi = Math.max(hi, v);
      }
      expect(lo).toBeGreaterThanOrEqual(0);
      expect(hi).toBeLessThanOrEqual(1 + 1e-9);
    }
  });

  it("surfaces a readable error for a corrupted manifest", async () => {
    const read = fixtureReader();
    const broken = async (name: string) => {
      const buf = await read(name);
      if (name === "manifest.json") {
        const doc = JSON.parse(new TextDecoder().decode(buf));
        doc.vertex_count += 1;
        return new TextEncoder().encode(JSON.stringify(doc)).buffer as ArrayBuffer;
      }
      return buf;
    };
    await expect(loadBundle(broken)).rejects.toThrow(/neutral buffer/);
  });

  it("rejects a truncated png", async () => {
    const read = fixtureReader();
    const manifest = await fixtureJson<{ masks: { file: string }[] }>("manifest.json");
    const png = await read(manifest.masks[0].file);
    await expect(decodeGray16(png.slice(0, 40))).rejects.toThrow();
  });
});
