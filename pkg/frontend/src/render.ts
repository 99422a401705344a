/**
 * Canvas compositing: grayscale base, probability map, semi-transparent
 * mask fill, ground-truth contour, click marker. The UI never computes a
 * mask itself; every overlay pixel comes from the server's RLE or PNG.
 */

import { SegmentResponse } from "./api.js";
import { ViewState } from "./state.js";
import { rleDecode } from "./rle.js";

export type Rgba = [number, number, number, number];

export const MASK_FILL: Rgba = [66, 135, 245, 96];
export const GT_STROKE = "rgba(57, 217, 138, 0.95)";
export const CLICK_STROKE = "rgba(255, 80, 80, 0.95)";

/** Flat RGBA buffer with `color` on foreground pixels, transparent elsewhere. */
export function maskToRgba(
  mask: Uint8Array,
  width: number,
  height: number,
  color: Rgba,
): Uint8ClampedArray<ArrayBuffer> {
  const out = new Uint8ClampedArray(width * height * 4);
  for (let i = 0; i < width * height; i++) {
    if (mask[i]) {
      out[i * 4] = color[0];
      out[i * 4 + 1] = color[1];
      out[i * 4 + 2] = color[2];
      out[i * 4 + 3] = color[3];
    }
  }
  return out;
}

/**
 * Boundary edges of the foreground as unit segments [x0, y0, x1, y1] in
 * image coordinates: each foreground pixel contributes the sides it shares
 * with background or with the outside of the image.
 */
export function contourSegments(
  mask: Uint8Array,
  width: number,
  height: number,
): Array<[number, number, number, number]> {
  const at = (x: number, y: number): number =>
    x >= 0 && x < width && y >= 0 && y < height ? (mask[y * width + x] as number) : 0;
  const segments: Array<[number, number, number, number]> = [];
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      if (!at(x, y)) continue;
      if (!at(x, y - 1)) segments.push([x, y, x + 1, y]);
      if (!at(x, y + 1)) segments.push([x, y + 1, x + 1, y + 1]);
      if (!at(x - 1, y)) segments.push([x, y, x, y + 1]);
      if (!at(x + 1, y)) segments.push([x + 1, y, x + 1, y + 1]);
    }
  }
  return segments;
}

function drawMask(
  ctx: CanvasRenderingContext2D,
  mask: Uint8Array,
  width: number,
  height: number,
  zoom: number,
): void {
  const off = document.createElement("canvas");
  off.width = width;
  off.height = height;
  const offCtx = off.getContext("2d");
  if (!offCtx) return;
  offCtx.putImageData(new ImageData(maskToRgba(mask, width, height, MASK_FILL), width, height), 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(off, 0, 0, width * zoom, height * zoom);
}

function drawContour(
  ctx: CanvasRenderingContext2D,
  mask: Uint8Array,
  width: number,
  height: number,
  zoom: number,
): void {
  ctx.strokeStyle = GT_STROKE;
  ctx.lineWidth = Math.max(1, zoom / 2);
  ctx.beginPath();
  for (const [x0, y0, x1, y1] of contourSegments(mask, width, height)) {
    ctx.moveTo(x0 * zoom, y0 * zoom);
    ctx.lineTo(x1 * zoom, y1 * zoom);
  }
  ctx.stroke();
}

function drawClickMarker(ctx: CanvasRenderingContext2D, x: number, y: number, zoom: number): void {
  const cx = (x + 0.5) * zoom;
  const cy = (y + 0.5) * zoom;
  const r = Math.max(4, 3 * zoom);
  ctx.strokeStyle = CLICK_STROKE;
  ctx.lineWidth = 2;
  ctx.beginPath();
  ctx.moveTo(cx - r, cy);
  ctx.lineTo(cx + r, cy);
  ctx.moveTo(cx, cy - r);
  ctx.lineTo(cx, cy + r);
  ctx.stroke();
}

export interface SliceAssets {
  base: CanvasImageSource | null; // slice PNG, fetched by <img>
  probability: CanvasImageSource | null; // decoded from response prob_map
  groundTruth: Uint8Array | null; // decoded from the mask endpoint's RLE
  width: number;
  height: number;
}

/** Composite one slice view; with no click yet this is the base image only. */
export function renderSlice(
  ctx: CanvasRenderingContext2D,
  state: ViewState,
  assets: SliceAssets,
  zoom: number,
): void {
  const { width, height } = assets;
  ctx.canvas.width = width * zoom;
  ctx.canvas.height = height * zoom;
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, width * zoom, height * zoom);
  if (assets.base) ctx.drawImage(assets.base, 0, 0, width * zoom, height * zoom);

  const response: SegmentResponse | null = state.lastResponse;
  if (response && state.overlay.probability && assets.probability) {
    ctx.globalAlpha = 0.45;
    ctx.drawImage(assets.probability, 0, 0, width * zoom, height * zoom);
    ctx.globalAlpha = 1.0;
  }
  if (response && state.overlay.mask) {
    drawMask(ctx, rleDecode(response.mask_rle, width, height), width, height, zoom);
  }
  if (state.overlay.groundTruth && assets.groundTruth) {
    drawContour(ctx, assets.groundTruth, width, height, zoom);
  }
  if (state.lastClick) {
    drawClickMarker(ctx, state.lastClick.x, state.lastClick.y, zoom);
  }
}
