// Wire types for the simulation service plus the decoding helpers every
// view needs. Field names mirror the JSON documents exactly, so snake_case
// is deliberate here.

export const PROTOCOL_VERSION = 1;
export const SLIDER_MIN = 0;
export const SLIDER_MAX = 120;
export const N_CHANNELS = 4;

export interface OverlayDoc {
  kind: string; // 'keypoint_affine'
  A: number[][][]; // one 2x2 block per latent pair, already in pixel coords
  c: number[][]; // matching pixel offsets
}

export interface HelloMsg {
  kind: 'hello';
  version: number;
  models: string[];
  model: string | null;
  rate_hz: number;
  pixel_format: string;
  slider_range: [number, number];
  m?: number;
  family?: string;
  img_h?: number;
  img_w?: number;
  u_rest?: number[];
  z0?: number[];
  overlay?: OverlayDoc | null;
}

export interface FrameMsg {
  kind: 'frame';
  tick: number;
  u: number[];
  z: number[];
  zdot: number[];
  pixels: string; // base64 little-endian float32, row major
  paused: boolean;
}

export interface ListModelsMsg {
  kind: 'list_models';
  models: string[];
}

export interface SaveStateMsg {
  kind: 'save_state';
  index: number;
  static: boolean;
  u: number[];
  z: number[];
}

export interface ExportMsg {
  kind: 'export';
  model: string;
  text: string;
}

export interface ErrorMsg {
  kind: 'error';
  message: string;
  diverged?: boolean;
}

export type ServerMsg =
  | HelloMsg
  | FrameMsg
  | ListModelsMsg
  | SaveStateMsg
  | ExportMsg
  | ErrorMsg;

export function parseServerMsg(raw: string): ServerMsg | null {
  let doc: unknown;
  try {
    doc = JSON.parse(raw);
  } catch {
    return null;
  }
  if (typeof doc !== 'object' || doc === null) return null;
  const kind = (doc as { kind?: unknown }).kind;
  if (typeof kind !== 'string') return null;
  return doc as ServerMsg;
}

export function clampPressure(v: number): number {
  if (!Number.isFinite(v)) return SLIDER_MIN;
  return Math.min(SLIDER_MAX, Math.max(SLIDER_MIN, v));
}

/** Decode a frame's pixel payload. Explicit little-endian reads so the
 * result is bit-identical to the server's float32 buffer on any host. */
export function decodePixels(b64: string): Float32Array {
  const bin = atob(b64);
  const bytes = new Uint8Array(bin.length);
  for (let i = 0; i < bin.length; i++) bytes[i] = bin.charCodeAt(i);
  const view = new DataView(bytes.buffer);
  const out = new Float32Array(bytes.length >> 2);
  for (let i = 0; i < out.length; i++) out[i] = view.getFloat32(i * 4, true);
  return out;
}

/** Marker pixel positions: the overlay affine applied to latent pairs
 * (z[2j], z[2j+1]). The server bakes the image-coordinate flip into A
 * and c, so no axis fiddling happens client side. */
export function markerPositions(
  z: number[],
  overlay: OverlayDoc,
): [number, number][] {
  const pts: [number, number][] = [];
  for (let j = 0; j < overlay.c.length; j++) {
    const a = overlay.A[j];
    const zx = z[2 * j];
    const zy = z[2 * j + 1];
    pts.push([
      a[0][0] * zx + a[0][1] * zy + overlay.c[j][0],
      a[1][0] * zx + a[1][1] * zy + overlay.c[j][1],
    ]);
  }
  return pts;
}
