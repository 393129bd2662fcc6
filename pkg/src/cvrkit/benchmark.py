"""Benchmark construction from clip manifests.

Covers temporal-overlap deduplication, grouping of equivalent narrations into
multi-target sets, local/global gallery assembly, and percentile-stratified
distractor sampling around each target clip.
"""

from __future__ import annotations

import hashlib
import logging
import math
import random
from dataclasses import dataclass, field

import numpy as np

from .embedding import cosine_similarity
from .errors import InvalidSpanError, MissingClipError, MissingEmbeddingError, MissingTargetError
from .fusion import ComposedQuery
from .textnorm import narration_group_key, narration_verb

log = logging.getLogger(__name__)

# Clip durations observed in the real benchmark; synthetic data only warns.
EXPECTED_DURATION_RANGE = (3.9, 8.1)

LOCAL_GALLERY_MAX = 10
DISTRACTORS_PER_TARGET = 6
STRATUM_DRAWS = (1, 4, 1)  # bottom / middle / top of the narration-similarity ranking


@dataclass(frozen=True)
class ClipManifestEntry:
    clip_id: str
    source_video_id: str
    start_s: float
    end_s: float
    narration: str
    action_label: str | None = None
    is_query: bool = False
    is_target: bool = False
    is_distractor_candidate: bool = True

    def __post_init__(self):
        if not self.clip_id or not self.source_video_id:
            raise MissingClipError("clip_id and source_video_id must be non-empty")
        object.__setattr__(self, "start_s", float(self.start_s))
        object.__setattr__(self, "end_s", float(self.end_s))
        if not (0 <= self.start_s < self.end_s):
            raise InvalidSpanError(
                f"clip {self.clip_id!r}: invalid span [{self.start_s}, {self.end_s})"
            )

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s

    def action_key(self) -> str:
        """Label when annotated, else the narration's verb heuristic."""
        if self.action_label:
            return f"label:{self.action_label.strip().lower()}"
        return f"verb:{narration_verb(self.narration)}"


@dataclass(frozen=True)
class DistractorPool:
    target_id: str
    candidates: tuple[tuple[str, float], ...]  # ranked by (similarity asc, id asc)
    selected: tuple[str, ...]


@dataclass
class BenchmarkManifest:
    clips: dict[str, ClipManifestEntry]
    queries: list[ComposedQuery]
    labels: dict[str, str] = field(default_factory=dict)  # query_id -> instruction class

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        seen_q: set[str] = set()
        for q in self.queries:
            if q.query_id in seen_q:
                raise MissingClipError(f"duplicate query id {q.query_id!r}")
            seen_q.add(q.query_id)
            if q.query_clip not in self.clips:
                raise MissingClipError(
                    f"query {q.query_id!r} references unknown clip {q.query_clip!r}"
                )
            for target in sorted(q.target_ids):
                if target not in self.clips:
                    raise MissingTargetError(
                        f"query {q.query_id!r} references unknown target {target!r}"
                    )
            for clip_id in sorted(q.local_gallery_ids):
                if clip_id not in self.clips:
                    raise MissingClipError(
                        f"query {q.query_id!r} local gallery references unknown clip {clip_id!r}"
                    )
            if q.source_video_id is None:
                q.source_video_id = self.clips[q.query_clip].source_video_id
        lo, hi = EXPECTED_DURATION_RANGE
        odd = sum(1 for c in self.clips.values() if not (lo <= c.duration_s <= hi))
        if odd:
            log.warning(
                "%d of %d clips fall outside the expected %.1f-%.1f s duration range",
                odd, len(self.clips), lo, hi,
            )

    @property
    def mean_targets_per_query(self) -> float:
        if not self.queries:
            return 0.0
        return sum(len(q.target_ids) for q in self.queries) / len(self.queries)

    def annotated_clip_ids(self) -> set[str]:
        """Clips used as a query or target anywhere in the benchmark."""
        used = {q.query_clip for q in self.queries}
        for q in self.queries:
            used.update(q.target_ids)
        used.update(c.clip_id for c in self.clips.values() if c.is_query or c.is_target)
        return used


def filter_overlapping_clips(entries: list[ClipManifestEntry]) -> list[ClipManifestEntry]:
    """Keep a maximal pairwise non-overlapping subset per source video.

    Greedy earliest-end interval scheduling over half-open [start_s, end_s)
    spans, with ties broken by (start_s, clip_id).
    """
    by_video: dict[str, list[ClipManifestEntry]] = {}
    for entry in entries:
        by_video.setdefault(entry.source_video_id, []).append(entry)

    retained: list[ClipManifestEntry] = []
    for video_id in sorted(by_video):
        group = sorted(by_video[video_id], key=lambda c: (c.end_s, c.start_s, c.clip_id))
        last_end = -math.inf
        for clip in group:
            if clip.start_s >= last_end:
                retained.append(clip)
                last_end = clip.end_s
    retained.sort(key=lambda c: (c.source_video_id, c.start_s, c.clip_id))
    return retained


def group_equivalent_narrations(entries: list[ClipManifestEntry]) -> dict[str, list[str]]:
    """Partition clip ids by canonicalized narration (multi-target groups)."""
    groups: dict[str, list[str]] = {}
    for entry in entries:
        groups.setdefault(narration_group_key(entry.narration), []).append(entry.clip_id)
    return {key: sorted(ids) for key, ids in groups.items()}


def derive_seed(global_seed: int, *scope: str) -> int:
    """Stable per-scope RNG seed so parallel order cannot change samples."""
    h = hashlib.sha256(":".join([str(global_seed), *scope]).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "big")


def sample_distractors(
    target: ClipManifestEntry,
    pool: list[ClipManifestEntry],
    narration_embeddings: dict[str, np.ndarray],
    seed: int,
    *,
    annotated_ids: set[str] | None = None,
    total: int = DISTRACTORS_PER_TARGET,
    draws: tuple[int, int, int] = STRATUM_DRAWS,
) -> DistractorPool:
    """Draw up to `total` distractors stratified by narration similarity.

    Candidates are ranked by cosine similarity of their narration embedding
    to the target's; rank-based strata are the bottom ceil(0.1 m), the top
    ceil(0.1 m) and the middle remainder, drawn (1, 4, 1) without
    replacement. Short strata backfill from the middle, then from anywhere.
    """
    annotated = annotated_ids or set()
    target_key = target.action_key()
    eligible: list[ClipManifestEntry] = []
    for clip in pool:
        if clip.clip_id == target.clip_id:
            continue
        if clip.source_video_id != target.source_video_id:
            continue
        if clip.is_query or clip.is_target or clip.clip_id in annotated:
            continue
        if not clip.is_distractor_candidate:
            continue
        if clip.action_key() == target_key:
            continue
        eligible.append(clip)

    if target.clip_id not in narration_embeddings:
        raise MissingEmbeddingError(f"no narration embedding for target {target.clip_id!r}")
    target_vec = narration_embeddings[target.clip_id]
    ranked: list[tuple[str, float]] = []
    for clip in eligible:
        if clip.clip_id not in narration_embeddings:
            raise MissingEmbeddingError(f"no narration embedding for clip {clip.clip_id!r}")
        ranked.append((clip.clip_id, cosine_similarity(narration_embeddings[clip.clip_id], target_vec)))
    ranked.sort(key=lambda pair: (pair[1], pair[0]))

    m = len(ranked)
    if m == 0:
        return DistractorPool(target.clip_id, (), ())

    edge = math.ceil(0.1 * m)
    top_start = max(edge, m - edge)  # strata must partition even for tiny pools
    bottom = [cid for cid, _ in ranked[:edge]]
    middle = [cid for cid, _ in ranked[edge:top_start]]
    top = [cid for cid, _ in ranked[top_start:]]

    rng = random.Random(derive_seed(seed, "distractors", target.clip_id))
    selected: list[str] = []
    for stratum, want in zip((bottom, middle, top), draws):
        selected.extend(rng.sample(stratum, min(want, len(stratum))))

    budget = min(total, m)
    if len(selected) < budget:
        chosen = set(selected)
        middle_left = [cid for cid in middle if cid not in chosen]
        fill = rng.sample(middle_left, min(budget - len(selected), len(middle_left)))
        selected.extend(fill)
        chosen.update(fill)
        if len(selected) < budget:
            rest = [cid for cid, _ in ranked if cid not in chosen]
            selected.extend(rng.sample(rest, budget - len(selected)))

    return DistractorPool(target.clip_id, tuple(ranked), tuple(selected))


def sample_all_distractors(
    manifest: BenchmarkManifest,
    narration_embeddings: dict[str, np.ndarray],
    seed: int,
) -> dict[str, DistractorPool]:
    """One pool per distinct target clip across the benchmark."""
    targets = sorted({t for q in manifest.queries for t in q.target_ids})
    annotated = manifest.annotated_clip_ids()
    clips = list(manifest.clips.values())
    pools: dict[str, DistractorPool] = {}
    for target_id in targets:
        target = manifest.clips[target_id]
        pool = [c for c in clips if c.source_video_id == target.source_video_id]
        pools[target_id] = sample_distractors(
            target, pool, narration_embeddings, seed, annotated_ids=annotated
        )
    return pools


def build_local_gallery(
    query: ComposedQuery,
    manifest: BenchmarkManifest,
    pools: dict[str, DistractorPool],
) -> set[str]:
    """Targets plus their sampled distractors, query clip excluded."""
    ids: set[str] = set()
    for target_id in sorted(query.target_ids):
        if target_id not in manifest.clips:
            raise MissingTargetError(f"query {query.query_id!r}: unknown target {target_id!r}")
        ids.add(target_id)
        pool = pools.get(target_id)
        if pool is not None:
            ids.update(pool.selected)
    ids.discard(query.query_clip)
    if len(ids) > LOCAL_GALLERY_MAX:
        log.warning(
            "query %s: local gallery has %d clips (> %d observed maximum)",
            query.query_id, len(ids), LOCAL_GALLERY_MAX,
        )
    return ids


def build_global_gallery_ids(
    manifest: BenchmarkManifest,
    pools: dict[str, DistractorPool] | None = None,
) -> tuple[str, ...]:
    """Union of all query clips, target clips and sampled distractors.

    Sorted, so the result is independent of manifest ordering. Per-query
    self-exclusion happens at query time, not here.
    """
    ids: set[str] = set()
    for q in manifest.queries:
        ids.add(q.query_clip)
        ids.update(q.target_ids)
        ids.update(q.local_gallery_ids)
    for pool in (pools or {}).values():
        ids.add(pool.target_id)
        ids.update(pool.selected)
    return tuple(sorted(ids))
