/** Small vector helpers shared by the exporters. */

export function l2Normalize(values: Float64Array | number[]): Float64Array {
  let sum = 0;
  for (const v of values) {
    if (!Number.isFinite(v)) throw new Error("vector contains NaN or Inf");
    sum += v * v;
  }
  const norm = Math.sqrt(sum);
  if (norm <= 1e-12) throw new Error("cannot normalize a zero vector");
  const out = new Float64Array(values.length);
  for (let i = 0; i < values.length; i++) out[i] = values[i] / norm;
  return out;
}

export function meanPool(rows: Float32Array[]): Float64Array {
  if (rows.length === 0) throw new Error("cannot pool an empty frame sequence");
  const dim = rows[0].length;
  const mean = new Float64Array(dim);
  for (const row of rows) {
    if (row.length !== dim) throw new Error("frame dims disagree");
    for (let i = 0; i < dim; i++) mean[i] += row[i];
  }
  for (let i = 0; i < dim; i++) mean[i] /= rows.length;
  return l2Normalize(mean);
}

export function cosine(a: ArrayLike<number>, b: ArrayLike<number>): number {
  if (a.length !== b.length) throw new Error("dim mismatch");
  let dot = 0;
  let na = 0;
  let nb = 0;
  for (let i = 0; i < a.length; i++) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / (Math.sqrt(na) * Math.sqrt(nb));
}

/** Center-of-bin sampling: floor((i + 0.5) * numFrames / k), non-decreasing. */
export function uniformFrameIndices(numFrames: number, k: number): number[] {
  if (numFrames < 1 || k < 1) throw new Error("numFrames and k must be positive");
  const indices: number[] = [];
  for (let i = 0; i < k; i++) {
    indices.push(Math.floor(((2 * i + 1) * numFrames) / (2 * k)));
  }
  return indices;
}

export function middleFrameIndex(numFrames: number): number {
  if (numFrames < 1) throw new Error("numFrames must be positive");
  return Math.floor(numFrames / 2);
}

export function toFloat32(values: ArrayLike<number>): Float32Array {
  return Float32Array.from(values as number[]);
}
