/**
 * Minimal 16-bit grayscale PNG decoder.
 *
 * The rig bundle stores masks and displacement maps as standard PNGs
 * (bit depth 16, color type 0). Decompression uses the platform
 * DecompressionStream, available in modern browsers and Node 18+.
 */

const PNG_SIGNATURE = [0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a];

export interface Gray16Image {
  width: number;
  height: number;
  /** row-major uint16 samples */
  data: Uint16Array;
}

async function inflate(compressed: Uint8Array): Promise<Uint8Array> {
  const ds = new DecompressionStream("deflate"); // zlib-wrapped stream
  const stream = new Blob([compressed as BlobPart]).stream().pipeThrough(ds);
  const out = new Uint8Array(await new Response(stream).arrayBuffer());
  return out;
}

export async function decodeGray16(buffer: ArrayBuffer): Promise<Gray16Image> {
  const bytes = new Uint8Array(buffer);
  for (let i = 0; i < 8; i++) {
    if (bytes[i] !== PNG_SIGNATURE[i]) throw new Error("not a png stream");
  }
  const view = new DataView(buffer);
  let pos = 8;
  let width = 0;
  let height = 0;
  const idatParts: Uint8Array[] = [];
  while (pos < bytes.length) {
    const length = view.getUint32(pos);
    const tag = String.fromCharCode(bytes[pos + 4], bytes[pos + 5], bytes[pos + 6], bytes[pos + 7]);
    const payload = bytes.subarray(pos + 8, pos + 8 + length);
    pos += 12 + length;
    if (tag === "IHDR") {
      const hv = new DataView(buffer, pos - 12 - length + 8, length);
      width = hv.getUint32(0);
      height = hv.getUint32(4);
      const depth = hv.getUint8(8);
      const color = hv.getUint8(9);
      const interlace = hv.getUint8(12);
      if (depth !== 16 || color !== 0 || interlace !== 0) {
        throw new Error("unsupported png: need 16-bit grayscale, no interlace");
      }
    } else if (tag === "IDAT") {
      idatParts.push(payload);
    } else if (tag === "IEND") {
      break;
    }
  }
  if (!width || !height) throw new Error("png missing IHDR");

  const total = idatParts.reduce((n, p) => n + p.length, 0);
  const compressed = new Uint8Array(total);
  let off = 0;
  for (const p of idatParts) {
    compressed.set(p, off);
    off += p.length;
  }
  const raw = await inflate(compressed);

  const stride = 2 * width;
  if (raw.length !== height * (stride + 1)) throw new Error("png payload size mismatch");
  const unfiltered = unfilterScanlines(raw, height, stride, 2);
  const data = new Uint16Array(width * height);
  for (let i = 0; i < data.length; i++) {
    data[i] = (unfiltered[2 * i] << 8) | unfiltered[2 * i + 1]; // big-endian samples
  }
  return { width, height, data };
}

function unfilterScanlines(raw: Uint8Array, height: number, stride: number, bpp: number): Uint8Array {
  const out = new Uint8Array(height * stride);
  for (let y = 0; y < height; y++) {
    const filter = raw[y * (stride + 1)];
    const src = y * (stride + 1) + 1;
    const dst = y * stride;
    const prev = dst - stride;
    for (let i = 0; i < stride; i++) {
      const x = raw[src + i];
      const left = i >= bpp ? out[dst + i - bpp] : 0;
      const up = y > 0 ? out[prev + i] : 0;
      const ul = y > 0 && i >= bpp ? out[prev + i - bpp] : 0;
      let value: number;
      switch (filter) {
        case 0:
          value = x;
          break;
        case 1:
          value = x + left;
          break;
        case 2:
          value = x + up;
          break;
        case 3:
          value = x + ((left + up) >> 1);
          break;
        case 4: {
          const p = left + up - ul;
          const pa = Math.abs(p - left);
          const pb = Math.abs(p - up);
          const pc = Math.abs(p - ul);
          const pred = pa <= pb && pa <= pc ? left : pb <= pc ? up : ul;
          value = x + pred;
          break;
        }
        default:
          throw new Error(`unknown png filter ${filter}`);
      }
      out[dst + i] = value & 0xff;
    }
  }
  return out;
}
