// Binary tensor interchange: ASCII magic "TNS1", then a u32 little-endian
// rank, `rank` u32 dims, and the f32 payload in row-major order.

export interface Tensor {
  dims: number[];
  data: Float32Array;
}

const MAGIC = [0x54, 0x4e, 0x53, 0x31]; // "TNS1"

export class TnsError extends Error {}

export function parseTns(buf: ArrayBuffer): Tensor {
  const view = new DataView(buf);
  if (buf.byteLength < 8) {
    throw new TnsError(`tensor blob too short: ${buf.byteLength} bytes`);
  }
  for (let i = 0; i < 4; i++) {
    if (view.getUint8(i) !== MAGIC[i]) {
      throw new TnsError("bad tensor magic, expected TNS1");
    }
  }
  const rank = view.getUint32(4, true);
  if (rank > 8) {
    throw new TnsError(`unreasonable tensor rank ${rank}`);
  }
  const headerBytes = 8 + 4 * rank;
  if (buf.byteLength < headerBytes) {
    throw new TnsError("tensor header truncated");
  }
  const dims: number[] = [];
  let count = 1;
  for (let i = 0; i < rank; i++) {
    const d = view.getUint32(8 + 4 * i, true);
    dims.push(d);
    count *= d;
  }
  if (buf.byteLength !== headerBytes + 4 * count) {
    throw new TnsError(
      `tensor payload size mismatch: header says ${count} elements, ` +
        `body holds ${(buf.byteLength - headerBytes) / 4}`,
    );
  }
  // Slice so the Float32Array is 4-byte aligned regardless of source offset.
  const body = buf.slice(headerBytes);
  return { dims, data: new Float32Array(body) };
}

export function serializeTns(t: Tensor): ArrayBuffer {
  const count = t.dims.reduce((a, b) => a * b, 1);
  if (count !== t.data.length) {
    throw new TnsError(
      `dims ${JSON.stringify(t.dims)} imply ${count} elements, data has ${t.data.length}`,
    );
  }
  const buf = new ArrayBuffer(8 + 4 * t.dims.length + 4 * count);
  const view = new DataView(buf);
  MAGIC.forEach((b, i) => view.setUint8(i, b));
  view.setUint32(4, t.dims.length, true);
  t.dims.forEach((d, i) => view.setUint32(8 + 4 * i, d, true));
  new Float32Array(buf, 8 + 4 * t.dims.length).set(t.data);
  return buf;
}

/* Row-major element lookup; bounds-checked. */
export function tensorAt(t: Tensor, ...idx: number[]): number {
  if (idx.length !== t.dims.length) {
    throw new TnsError(`expected ${t.dims.length} indices, got ${idx.length}`);
  }
  let flat = 0;
  for (let i = 0; i < idx.length; i++) {
    const j = idx[i];
    if (!Number.isInteger(j) || j < 0 || j >= t.dims[i]) {
      throw new TnsError(`index ${j} out of range for axis ${i} (dim ${t.dims[i]})`);
    }
    flat = flat * t.dims[i] + j;
  }
  return t.data[flat];
}

export function zerosLike(dims: number[]): Tensor {
  const count = dims.reduce((a, b) => a * b, 1);
  return { dims: [...dims], data: new Float32Array(count) };
}

const B64_CHARS = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

/* Base64 helpers that work in both browsers and node without Buffer. */
export function bytesToBase64(bytes: Uint8Array): string {
  let out = "";
  for (let i = 0; i < bytes.length; i += 3) {
    const b0 = bytes[i];
    const b1 = i + 1 < bytes.length ? bytes[i + 1] : 0;
    const b2 = i + 2 < bytes.length ? bytes[i + 2] : 0;
    out += B64_CHARS[b0 >> 2];
    out += B64_CHARS[((b0 & 3) << 4) | (b1 >> 4)];
    out += i + 1 < bytes.length ? B64_CHARS[((b1 & 15) << 2) | (b2 >> 6)] : "=";
    out += i + 2 < bytes.length ? B64_CHARS[b2 & 63] : "=";
  }
  return out;
}

export function base64ToBytes(text: string): Uint8Array {
  const clean = text.replace(/[\s=]+$/g, "");
  const out = new Uint8Array(Math.floor((clean.length * 3) / 4));
  let acc = 0;
  let bits = 0;
  let j = 0;
  for (const ch of clean) {
    const v = B64_CHARS.indexOf(ch);
    if (v < 0) throw new TnsError(`bad base64 character ${JSON.stringify(ch)}`);
    acc = (acc << 6) | v;
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out[j++] = (acc >> bits) & 0xff;
    }
  }
  return out.subarray(0, j);
}
