#!/usr/bin/env node
/**
 * Export CLI: `node dist/cli.js <export-embeddings|export-captions> job.json`
 *
 * The job file fields are described in export.ts; paths resolve against the
 * job file's directory.
 */

import { promises as fs } from "node:fs";
import path from "node:path";

import { ExportJob, exportCaptions, exportClipEmbeddings, normalizeJob } from "./export.js";

function resolveJobPaths(job: ExportJob, baseDir: string): ExportJob {
  const resolve = (p: string | undefined) =>
    p === undefined ? p : path.isAbsolute(p) ? p : path.join(baseDir, p);
  return {
    ...job,
    manifest: resolve(job.manifest)!,
    output: resolve(job.output)!,
    pooledOutput: resolve(job.pooledOutput),
  };
}

async function main(): Promise<number> {
  const [command, jobPath] = process.argv.slice(2);
  if (!command || !jobPath) {
    console.error("usage: cli.js <export-embeddings|export-captions> job.json");
    return 2;
  }
  const raw = JSON.parse(await fs.readFile(jobPath, "utf-8"));
  const job = resolveJobPaths(normalizeJob(raw), path.dirname(path.resolve(jobPath)));

  if (command === "export-embeddings") {
    const files = await exportClipEmbeddings(job);
    for (const file of files) console.log(`wrote ${file}`);
    return 0;
  }
  if (command === "export-captions") {
    console.log(`wrote ${await exportCaptions(job)}`);
    return 0;
  }
  console.error(`unknown command ${command}`);
  return 2;
}

main()
  .then((code) => process.exit(code))
  .catch((err) => {
    console.error(`error: ${err instanceof Error ? err.message : err}`);
    process.exit(1);
  });
