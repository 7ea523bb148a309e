// Pixel buffer conversions for the canvas views. Pure functions over
// typed arrays; the thumbnail reduction is deterministic so the same
// saved observation always renders the same thumbnail.

export function grayscaleRgba(pix: Float32Array): Uint8ClampedArray<ArrayBuffer> {
  const out = new Uint8ClampedArray(pix.length * 4);
  for (let i = 0; i < pix.length; i++) {
    const v = Math.max(0, Math.min(1, pix[i])) * 255;
    out[4 * i] = v;
    out[4 * i + 1] = v;
    out[4 * i + 2] = v;
    out[4 * i + 3] = 255;
  }
  return out;
}

export interface Thumb {
  w: number;
  h: number;
  rgba: Uint8ClampedArray<ArrayBuffer>;
}

/** Block-mean downscale of a row-major image to at most maxSide pixels
 * on the long edge. Integer block grid, so no resampling jitter. */
export function thumbnailRgba(
  pix: Float32Array,
  w: number,
  h: number,
  maxSide = 48,
): Thumb {
  const s = Math.max(1, Math.ceil(Math.max(w, h) / maxSide));
  const tw = Math.ceil(w / s);
  const th = Math.ceil(h / s);
  const rgba = new Uint8ClampedArray(tw * th * 4);
  for (let by = 0; by < th; by++) {
    for (let bx = 0; bx < tw; bx++) {
      let sum = 0;
      let n = 0;
      const y1 = Math.min(h, (by + 1) * s);
      const x1 = Math.min(w, (bx + 1) * s);
      for (let y = by * s; y < y1; y++) {
        for (let x = bx * s; x < x1; x++) {
          sum += pix[y * w + x];
          n++;
        }
      }
      const v = Math.max(0, Math.min(1, sum / n)) * 255;
      const o = 4 * (by * tw + bx);
      rgba[o] = v;
      rgba[o + 1] = v;
      rgba[o + 2] = v;
      rgba[o + 3] = 255;
    }
  }
  return { w: tw, h: th, rgba };
}
