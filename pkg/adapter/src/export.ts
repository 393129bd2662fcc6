/**
 * Export jobs: run an encoder (or captioner) over every clip in a manifest
 * and emit the engine's file formats. Exporters never rank or score; all
 * retrieval semantics stay in the engine.
 */

import { frameRecordId, writeEmbeddings } from "./cvre.js";
import { createCaptioner, createEncoder } from "./encoders.js";
import { readManifest, writeJsonl } from "./manifest.js";
import { l2Normalize, meanPool, toFloat32, uniformFrameIndices } from "./vectors.js";

export type Modality = "frame" | "video" | "text";

export interface ExportJob {
  model: string;
  modality: Modality;
  manifest: string;
  output: string;
  dim: number;
  seed: number;
  /** frames sampled per clip for the frame modality */
  framesPerClip?: number;
  /** assumed decode rate used to derive per-clip frame counts from spans */
  fps?: number;
  /** also write adapter-pooled per-clip vectors here (frame modality) */
  pooledOutput?: string;
}

export const DEFAULT_FRAMES_PER_CLIP = 15;
export const DEFAULT_FPS = 30;

export function normalizeJob(raw: Partial<ExportJob>): ExportJob {
  for (const field of ["model", "modality", "manifest", "output", "dim", "seed"] as const) {
    if (raw[field] === undefined) throw new Error(`export job is missing "${field}"`);
  }
  const job = {
    framesPerClip: DEFAULT_FRAMES_PER_CLIP,
    fps: DEFAULT_FPS,
    ...raw,
  } as ExportJob;
  if (!["frame", "video", "text"].includes(job.modality)) {
    throw new Error(`unknown modality ${job.modality}`);
  }
  return job;
}

function clipFrameCount(startS: number, endS: number, fps: number): number {
  return Math.max(1, Math.round((endS - startS) * fps));
}

export async function exportClipEmbeddings(job: ExportJob): Promise<string[]> {
  const manifest = await readManifest(job.manifest);
  const encoder = createEncoder(job.model, { dim: job.dim, seed: job.seed });
  const written: string[] = [];

  if (job.modality === "video") {
    const vectors = new Map<string, Float32Array>();
    for (const clip of manifest.clips) {
      vectors.set(clip.clip_id, encoder.encodeClip(clip.clip_id));
    }
    await writeEmbeddings(job.output, vectors);
    return [job.output];
  }

  if (job.modality === "text") {
    // narration embedding table for the engine's file-lookup text embedder
    const rows = manifest.clips.map((clip) => ({
      text: clip.narration,
      vector: [...encoder.encodeText(clip.narration)],
    }));
    await writeJsonl(job.output, rows);
    return [job.output];
  }

  const frames = new Map<string, Float32Array>();
  const pooled = new Map<string, Float32Array>();
  const k = job.framesPerClip ?? DEFAULT_FRAMES_PER_CLIP;
  for (const clip of manifest.clips) {
    const total = clipFrameCount(clip.start_s, clip.end_s, job.fps ?? DEFAULT_FPS);
    const rows: Float32Array[] = [];
    uniformFrameIndices(total, k).forEach((frameIndex, sampleIndex) => {
      const vec = encoder.encodeFrame(clip.clip_id, frameIndex);
      rows.push(vec);
      frames.set(frameRecordId(clip.clip_id, sampleIndex), vec);
    });
    pooled.set(clip.clip_id, toFloat32(meanPool(rows)));
  }
  await writeEmbeddings(job.output, frames);
  written.push(job.output);
  if (job.pooledOutput) {
    await writeEmbeddings(job.pooledOutput, pooled);
    written.push(job.pooledOutput);
  }
  return written;
}

export async function exportCaptions(job: ExportJob): Promise<string> {
  const manifest = await readManifest(job.manifest);
  const captioner = createCaptioner(job.model, job.seed);
  const rows = manifest.clips.map((clip) => ({
    clip_id: clip.clip_id,
    caption: captioner.captionClip(clip.clip_id),
  }));
  await writeJsonl(job.output, rows);
  return job.output;
}

export async function exportTextEmbeddingsForCaptions(
  job: ExportJob,
  texts: string[],
): Promise<string> {
  const encoder = createEncoder(job.model, { dim: job.dim, seed: job.seed });
  const unique = [...new Set(texts.map((t) => t.trim().replace(/\s+/g, " ")))].sort();
  const rows = unique.map((text) => ({
    text,
    vector: [...toFloat32(l2Normalize([...encoder.encodeText(text)]))],
  }));
  await writeJsonl(job.output, rows);
  return job.output;
}
