/** Minimal JSONL manifest access: just what the exporters need. */

import { promises as fs } from "node:fs";
import path from "node:path";

export interface ClipRecord {
  clip_id: string;
  source_video_id: string;
  start_s: number;
  end_s: number;
  narration: string;
}

export interface QueryRecord {
  query_id: string;
  instruction: string;
}

export interface ManifestView {
  clips: ClipRecord[];
  queries: QueryRecord[];
}

export async function readManifest(filePath: string): Promise<ManifestView> {
  const text = await fs.readFile(filePath, "utf-8");
  const clips: ClipRecord[] = [];
  const queries: QueryRecord[] = [];
  text.split("\n").forEach((line, index) => {
    const stripped = line.trim();
    if (!stripped) return;
    let record: any;
    try {
      record = JSON.parse(stripped);
    } catch (err) {
      throw new Error(`${filePath}: line ${index + 1}: invalid JSON`);
    }
    if (record.type === "clip") {
      clips.push(record as ClipRecord);
    } else if (record.type === "query") {
      queries.push(record as QueryRecord);
    }
  });
  if (clips.length === 0) throw new Error(`${filePath}: no clip records`);
  return { clips, queries };
}

export async function writeJsonl(filePath: string, records: object[]): Promise<void> {
  await fs.mkdir(path.dirname(filePath), { recursive: true });
  const lines = records.map((r) => JSON.stringify(sortKeys(r))).join("\n");
  await fs.writeFile(filePath, lines + "\n");
}

function sortKeys(value: any): any {
  if (Array.isArray(value)) return value.map(sortKeys);
  if (value && typeof value === "object") {
    return Object.fromEntries(
      Object.keys(value)
        .sort()
        .map((k) => [k, sortKeys(value[k])]),
    );
  }
  return value;
}
