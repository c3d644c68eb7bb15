import { readFile } from "node:fs/promises";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";

import type { BundleReader } from "../src/bundle.js";

export const FIXTURE_DIR = join(dirname(fileURLToPath(import.meta.url)), "..", "fixtures", "bundle");

export function fixtureReader(root: string = FIXTURE_DIR): BundleReader {
  return async (name: string) => {
    const buf = await readFile(join(root, name));
    return buf.buffer.slice(buf.byteOffset, buf.byteOffset + buf.byteLength);
  };
}

export async function fixtureJson<T>(name: string): Promise<T> {
  const buf = await readFile(join(FIXTURE_DIR, name));
  return JSON.parse(buf.toString("utf-8")) as T;
}
