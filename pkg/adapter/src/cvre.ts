/**
 * CVRE binary embedding store, matching the engine's reader bit for bit.
 *
 * Layout (little-endian): magic "CVRE", version u32, dim u32, count u64,
 * then per record: id length u16, id bytes (UTF-8), dim * f32. Records are
 * written sorted by id so repeated exports are byte-identical.
 */

import { promises as fs } from "node:fs";
import path from "node:path";

export const MAGIC = "CVRE";
export const FORMAT_VERSION = 1;

const HEADER_BYTES = 4 + 4 + 4 + 8;

export function frameRecordId(clipId: string, frameIndex: number): string {
  return `${clipId}::frame${String(frameIndex).padStart(4, "0")}`;
}

export function encodeEmbeddings(vectors: Map<string, Float32Array>): Buffer {
  if (vectors.size === 0) throw new Error("refusing to write an empty embedding store");
  const ids = [...vectors.keys()].sort();
  const dim = vectors.get(ids[0])!.length;

  const chunks: Buffer[] = [];
  const header = Buffer.alloc(HEADER_BYTES);
  header.write(MAGIC, 0, "ascii");
  header.writeUInt32LE(FORMAT_VERSION, 4);
  header.writeUInt32LE(dim, 8);
  header.writeBigUInt64LE(BigInt(ids.length), 12);
  chunks.push(header);

  for (const id of ids) {
    const vec = vectors.get(id)!;
    if (vec.length !== dim) {
      throw new Error(`record ${id}: dim ${vec.length} != ${dim}`);
    }
    for (const v of vec) {
      if (!Number.isFinite(v)) throw new Error(`record ${id}: contains NaN or Inf`);
    }
    const rawId = Buffer.from(id, "utf-8");
    if (rawId.length > 0xffff) throw new Error(`record id too long: ${id}`);
    const idLen = Buffer.alloc(2);
    idLen.writeUInt16LE(rawId.length, 0);
    const body = Buffer.alloc(4 * dim);  // explicit LE, independent of host order
    for (let i = 0; i < dim; i++) body.writeFloatLE(vec[i], 4 * i);
    chunks.push(idLen, rawId, body);
  }
  return Buffer.concat(chunks);
}

export async function writeEmbeddings(
  filePath: string,
  vectors: Map<string, Float32Array>,
): Promise<void> {
  await fs.mkdir(path.dirname(filePath), { recursive: true });
  await fs.writeFile(filePath, encodeEmbeddings(vectors));
}

export function decodeEmbeddings(data: Buffer): Map<string, Float32Array> {
  if (data.length < HEADER_BYTES) throw new Error("truncated header");
  if (data.toString("ascii", 0, 4) !== MAGIC) throw new Error("bad magic");
  const version = data.readUInt32LE(4);
  if (version !== FORMAT_VERSION) throw new Error(`unsupported format version ${version}`);
  const dim = data.readUInt32LE(8);
  const count = Number(data.readBigUInt64LE(12));

  const vectors = new Map<string, Float32Array>();
  let offset = HEADER_BYTES;
  for (let r = 0; r < count; r++) {
    const idLen = data.readUInt16LE(offset);
    offset += 2;
    const id = data.toString("utf-8", offset, offset + idLen);
    offset += idLen;
    const vec = new Float32Array(dim);
    for (let i = 0; i < dim; i++) {
      vec[i] = data.readFloatLE(offset);
      offset += 4;
    }
    if (vectors.has(id)) throw new Error(`duplicate record id ${id}`);
    vectors.set(id, vec);
  }
  if (offset !== data.length) throw new Error("trailing bytes after records");
  return vectors;
}

export async function readEmbeddings(filePath: string): Promise<Map<string, Float32Array>> {
  return decodeEmbeddings(await fs.readFile(filePath));
}
