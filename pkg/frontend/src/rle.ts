/**
 * Run-length codec for binary masks, matching the server's rule bit for
 * bit: row-major scan, alternating run lengths, always starting with a
 * background run (possibly zero-length when the first pixel is
 * foreground). An all-background HxW mask is [H*W]; all-foreground is
 * [0, H*W].
 */

export function rleDecode(runs: number[], width: number, height: number): Uint8Array {
  const total = width * height;
  let sum = 0;
  for (const run of runs) {
    if (!Number.isInteger(run) || run < 0) {
      throw new Error(`rle: run lengths must be non-negative integers, got ${run}`);
    }
    sum += run;
  }
  if (sum !== total) {
    throw new Error(`rle: runs sum to ${sum}, expected ${total} for ${width}x${height}`);
  }
  const mask = new Uint8Array(total);
  let pos = 0;
  for (let i = 0; i < runs.length; i++) {
    const run = runs[i] as number;
    if (i % 2 === 1) mask.fill(1, pos, pos + run);
    pos += run;
  }
  return mask;
}

export function rleEncode(mask: ArrayLike<number>, width: number, height: number): number[] {
  const total = width * height;
  if (mask.length !== total) {
    throw new Error(`rle: mask has ${mask.length} pixels, expected ${total}`);
  }
  const runs: number[] = [];
  let current = 0; // background first
  let length = 0;
  for (let i = 0; i < total; i++) {
    const v = mask[i];
    if (v !== 0 && v !== 1) throw new Error(`rle: mask values must be 0 or 1, got ${v}`);
    if (v === current) {
      length += 1;
    } else {
      runs.push(length);
      current = v;
      length = 1;
    }
  }
  runs.push(length);
  return runs;
}
