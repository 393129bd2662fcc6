"""Bit-exact on-disk formats: the CVRE binary embedding store and the JSONL
manifest / caption / label tables.

CVRE layout (little-endian throughout):

    magic   4 bytes  b"CVRE"
    version u32      currently 1
    dim     u32
    count   u64
    then per record: id_len u16, id bytes (UTF-8), dim * f32

Writers emit records sorted by id so repeated exports are byte-identical.
Per-frame records use ids of the form "<clip_id>::frame<NNNN>"; ingest pools
each frame group into the per-clip set and keeps a middle-frame variant.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .benchmark import BenchmarkManifest, ClipManifestEntry
from .embedding import (
    FrameEmbeddings,
    l2_normalize,
    mean_pool_frames,
    middle_frame_index,
)
from .errors import CvrkitError, DuplicateIdError, FormatError
from .fusion import ComposedQuery
from .pipeline import MIDDLE_VARIANT_SUFFIX
from .providers import CLASS_OBJECT, CLASS_TEMPORAL

MAGIC = b"CVRE"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sIIQ")
_ID_LEN = struct.Struct("<H")

_FRAME_ID = re.compile(r"^(?P<clip>.+)::frame(?P<idx>\d{4,})$")


def frame_record_id(clip_id: str, frame_index: int) -> str:
    return f"{clip_id}::frame{frame_index:04d}"


def parse_frame_record_id(record_id: str) -> tuple[str, int] | None:
    match = _FRAME_ID.match(record_id)
    if match is None:
        return None
    return match.group("clip"), int(match.group("idx"))


def write_embeddings(path: str | Path, vectors: dict[str, np.ndarray], *,
                     normalize: bool = True) -> None:
    """Write a CVRE file; records are sorted by id for byte-stable output."""
    if not vectors:
        raise FormatError("refusing to write an empty embedding file", path=str(path))
    dims = {int(np.asarray(v).shape[0]) for v in vectors.values()}
    if len(dims) != 1:
        raise FormatError(f"mixed dims {sorted(dims)}", path=str(path))
    dim = dims.pop()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, dim, len(vectors)))
        for record_id in sorted(vectors):
            vec = np.asarray(vectors[record_id], dtype=np.float32)
            if not np.all(np.isfinite(vec)):
                raise FormatError(f"record {record_id!r} contains NaN or Inf", path=str(path))
            if normalize:
                vec = l2_normalize(vec)
            raw_id = record_id.encode("utf-8")
            if len(raw_id) > 0xFFFF:
                raise FormatError(f"record id too long: {record_id!r}", path=str(path))
            fh.write(_ID_LEN.pack(len(raw_id)))
            fh.write(raw_id)
            fh.write(vec.astype("<f4").tobytes())


def read_embeddings(path: str | Path, *, validate: bool = True) -> dict[str, np.ndarray]:
    """Read a CVRE file, rejecting bad headers, duplicates and non-finite data."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", path=str(path), offset=len(data))
    magic, version, dim, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", path=str(path), offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", path=str(path), offset=4)
    if dim == 0:
        raise FormatError("dim must be positive", path=str(path), offset=8)

    vectors: dict[str, np.ndarray] = {}
    offset = _HEADER.size
    vec_bytes = 4 * dim
    for _ in range(count):
        if offset + _ID_LEN.size > len(data):
            raise FormatError("truncated record header", path=str(path), offset=offset)
        (id_len,) = _ID_LEN.unpack_from(data, offset)
        offset += _ID_LEN.size
        if offset + id_len + vec_bytes > len(data):
            raise FormatError("truncated record body", path=str(path), offset=offset)
        try:
            record_id = data[offset:offset + id_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"record id is not UTF-8: {exc}", path=str(path), offset=offset)
        offset += id_len
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=offset).copy()
        offset += vec_bytes
        if record_id in vectors:
            raise DuplicateIdError(f"{path}: duplicate record id {record_id!r}")
        if validate and not np.all(np.isfinite(vec)):
            raise FormatError(
                f"record {record_id!r} contains NaN or Inf", path=str(path), offset=offset
            )
        vectors[record_id] = vec
    if offset != len(data):
        raise FormatError(
            f"{len(data) - offset} trailing bytes after {count} records",
            path=str(path), offset=offset,
        )
    return vectors


def materialize_embedding_sets(name: str, vectors: dict[str, np.ndarray],
                               *, normalize: bool = True) -> dict[str, dict[str, np.ndarray]]:
    """Expand one raw store into engine-facing sets.

    Per-clip stores map through unchanged. Per-frame stores are pooled into
    the per-clip set and a "<name>#middle" variant keeps each clip's middle
    frame. Mixing frame and plain records in one store is rejected.
    """
    frame_rows: dict[str, list[tuple[int, np.ndarray]]] = {}
    plain: dict[str, np.ndarray] = {}
    for record_id, vec in vectors.items():
        parsed = parse_frame_record_id(record_id)
        if parsed is None:
            plain[record_id] = vec
        else:
            clip_id, idx = parsed
            frame_rows.setdefault(clip_id, []).append((idx, vec))
    if frame_rows and plain:
        raise FormatError(
            f"set {name!r} mixes per-frame and per-clip records; split the stores"
        )
    if not frame_rows:
        out = {cid: (l2_normalize(v) if normalize else v) for cid, v in plain.items()}
        return {name: out}

    pooled: dict[str, np.ndarray] = {}
    middles: dict[str, np.ndarray] = {}
    for clip_id, rows in frame_rows.items():
        rows.sort(key=lambda r: r[0])
        frames = FrameEmbeddings(clip_id=clip_id, frames=np.stack([v for _, v in rows]))
        pooled[clip_id] = mean_pool_frames(frames)
        middles[clip_id] = l2_normalize(frames.frames[middle_frame_index(frames.num_frames)])
    return {name: pooled, name + MIDDLE_VARIANT_SUFFIX: middles}


# ---------------------------------------------------------------------------
# JSONL tables


def _dump_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def iter_jsonl(path: str | Path):
    """Yield (line_number, record) for every non-blank line."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            try:
                record = json.loads(stripped)
            except json.JSONDecodeError as exc:
                raise FormatError(f"invalid JSON: {exc}", path=str(path), line=line_no)
            if not isinstance(record, dict):
                raise FormatError("record is not a JSON object", path=str(path), line=line_no)
            yield line_no, record


def write_jsonl(path: str | Path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(_dump_line(record) + "\n")


_CLASS_ALIASES = {
    "temporal": CLASS_TEMPORAL,
    "object_centred": CLASS_OBJECT,
    "object_centered": CLASS_OBJECT,
}


def _parse_class(value, path: Path, line_no: int) -> str:
    if isinstance(value, bool):
        return CLASS_TEMPORAL if value else CLASS_OBJECT
    key = str(value).strip().lower()
    if key not in _CLASS_ALIASES:
        raise FormatError(f"unknown instruction class {value!r}", path=str(path), line=line_no)
    return _CLASS_ALIASES[key]


def load_manifest(path: str | Path) -> BenchmarkManifest:
    """Parse a benchmark manifest (clip and query records in one JSONL file)."""
    path = Path(path)
    clips: dict[str, ClipManifestEntry] = {}
    queries: list[ComposedQuery] = []
    labels: dict[str, str] = {}
    for line_no, record in iter_jsonl(path):
        kind = record.get("type")
        try:
            if kind == "clip":
                entry = ClipManifestEntry(
                    clip_id=record["clip_id"],
                    source_video_id=record["source_video_id"],
                    start_s=float(record["start_s"]),
                    end_s=float(record["end_s"]),
                    narration=record.get("narration", ""),
                    action_label=record.get("action_label"),
                    is_query=bool(record.get("is_query", False)),
                    is_target=bool(record.get("is_target", False)),
                    is_distractor_candidate=bool(record.get("is_distractor_candidate", True)),
                )
                if entry.clip_id in clips:
                    raise DuplicateIdError(f"duplicate clip id {entry.clip_id!r}")
                clips[entry.clip_id] = entry
            elif kind == "query":
                query = ComposedQuery(
                    query_id=record["query_id"],
                    query_clip=record["query_clip"],
                    instruction_text=record["instruction"],
                    target_ids=frozenset(record["target_ids"]),
                    local_gallery_ids=frozenset(record.get("local_gallery_ids", ())),
                    instruction_class=(
                        _parse_class(record["instruction_class"], path, line_no)
                        if "instruction_class" in record else None
                    ),
                )
                queries.append(query)
                if query.instruction_class:
                    labels[query.query_id] = query.instruction_class
            else:
                raise FormatError(f"unknown record type {kind!r}", path=str(path), line=line_no)
        except KeyError as exc:
            raise FormatError(f"missing field {exc}", path=str(path), line=line_no)
        except (ValueError, TypeError) as exc:
            raise FormatError(str(exc), path=str(path), line=line_no)
    return BenchmarkManifest(clips=clips, queries=queries, labels=labels)


def save_manifest(manifest: BenchmarkManifest, path: str | Path) -> None:
    """Canonical manifest serialization (sorted records, compact JSON)."""
    records = []
    for clip_id in sorted(manifest.clips):
        c = manifest.clips[clip_id]
        rec = {
            "type": "clip",
            "clip_id": c.clip_id,
            "source_video_id": c.source_video_id,
            "start_s": c.start_s,
            "end_s": c.end_s,
            "narration": c.narration,
            "is_query": c.is_query,
            "is_target": c.is_target,
            "is_distractor_candidate": c.is_distractor_candidate,
        }
        if c.action_label is not None:
            rec["action_label"] = c.action_label
        records.append(rec)
    for q in sorted(manifest.queries, key=lambda q: q.query_id):
        rec = {
            "type": "query",
            "query_id": q.query_id,
            "query_clip": q.query_clip,
            "instruction": q.instruction_text,
            "target_ids": sorted(q.target_ids),
        }
        if q.local_gallery_ids:
            rec["local_gallery_ids"] = sorted(q.local_gallery_ids)
        label = q.instruction_class or manifest.labels.get(q.query_id)
        if label:
            rec["instruction_class"] = label
        records.append(rec)
    write_jsonl(path, records)


def load_caption_table(path: str | Path) -> dict[str, str]:
    """clip_id -> caption text."""
    table: dict[str, str] = {}
    for line_no, record in iter_jsonl(path):
        if "clip_id" not in record or "caption" not in record:
            raise FormatError("caption record needs clip_id and caption",
                              path=str(path), line=line_no)
        table[record["clip_id"]] = record["caption"]
    return table


def load_label_table(path: str | Path) -> dict[str, str]:
    """query_id -> instruction class."""
    path = Path(path)
    table: dict[str, str] = {}
    for line_no, record in iter_jsonl(path):
        if "query_id" not in record:
            raise FormatError("label record needs query_id", path=str(path), line=line_no)
        value = record.get("instruction_class", record.get("temporal"))
        if value is None:
            raise FormatError("label record needs instruction_class or temporal",
                              path=str(path), line=line_no)
        table[record["query_id"]] = _parse_class(value, path, line_no)
    return table


# ---------------------------------------------------------------------------
# Ingest


@dataclass
class IngestReport:
    sets: dict[str, dict] = field(default_factory=dict)
    diagnostics: list[str] = field(default_factory=list)
    manifest_stats: dict | None = None

    @property
    def ok(self) -> bool:
        return not self.diagnostics

    def to_payload(self) -> dict:
        return {
            "ok": self.ok,
            "sets": self.sets,
            "diagnostics": list(self.diagnostics),
            "manifest_stats": self.manifest_stats,
        }


def ingest(
    embedding_paths: dict[str, str | Path],
    manifest_path: str | Path | None = None,
    out_dir: str | Path | None = None,
) -> IngestReport:
    """Validate raw stores, normalize on write, cross-reference the manifest.

    Every diagnostic names the offending file and record; nothing is written
    for a set that fails validation.
    """
    report = IngestReport()
    manifest = None
    if manifest_path is not None:
        try:
            manifest = load_manifest(manifest_path)
        except (FormatError, DuplicateIdError) as exc:
            report.diagnostics.append(str(exc))
        else:
            report.manifest_stats = {
                "clips": len(manifest.clips),
                "queries": len(manifest.queries),
                "mean_targets_per_query": manifest.mean_targets_per_query,
            }

    needed: set[str] = set()
    if manifest is not None:
        for q in manifest.queries:
            needed.add(q.query_clip)
            needed.update(q.target_ids)
            needed.update(q.local_gallery_ids)

    for name in sorted(embedding_paths):
        src = Path(embedding_paths[name])
        try:
            raw = read_embeddings(src)
            sets = materialize_embedding_sets(name, raw)
        except (CvrkitError, FileNotFoundError, OSError) as exc:
            report.diagnostics.append(f"{src}: {exc}")
            continue
        clip_ids = set(sets[name])
        missing = sorted(needed - clip_ids)
        if missing:
            report.diagnostics.append(
                f"{src}: set {name!r} lacks embeddings for manifest clips: "
                + ", ".join(missing[:5]) + ("..." if len(missing) > 5 else "")
            )
            continue
        stats = {"records": len(raw), "clips": len(clip_ids),
                 "dim": int(next(iter(sets[name].values())).shape[0]),
                 "variants": sorted(sets)}
        if out_dir is not None:
            out = Path(out_dir)
            for set_name, vectors in sets.items():
                filename = set_name.replace(MIDDLE_VARIANT_SUFFIX, ".middle") + ".cvre"
                write_embeddings(out / filename, vectors, normalize=True)
            stats["written"] = str(out)
        report.sets[name] = stats
    return report
