"""Retrieval pipelines: vector-fusion baselines, caption-composed text
ranking over the full gallery, and the two-stage variant that first filters
the gallery down to the n_c visually closest candidates and re-ranks them by
text similarity.

A gallery is a set of clip ids with one index view per named embedding set,
so the filter stage and the ranking stage can use different encoders.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, replace

import numpy as np

from .errors import MissingEmbeddingError, MissingNarrationError, UnsupportedStrategyError
from .fusion import VECTOR_STRATEGIES, ComposedQuery, Strategy, fuse
from .index import GalleryIndex, RankedList, ScoredEntry, brute_force_rank
from .providers import (
    ProviderSet,
    TargetCaption,
    caption_video,
    compose_target_caption,
    embed_text,
)

DEFAULT_NUM_CANDIDATES = 15


class TemporalMode(str, enum.Enum):
    FULL_VIDEO = "full_video"
    MIDDLE_FRAME = "middle_frame"


class TextSource(str, enum.Enum):
    INSTRUCTION = "instruction"
    PREDICTED_CAPTION = "predicted_caption"
    GROUND_TRUTH_CAPTION = "ground_truth_caption"


MIDDLE_VARIANT_SUFFIX = "#middle"


class EmbeddingCatalog:
    """Named embedding sets: set name -> clip id -> unit vector."""

    def __init__(self):
        self._sets: dict[str, dict[str, np.ndarray]] = {}

    def add_set(self, name: str, vectors: dict[str, np.ndarray]) -> None:
        self._sets[name] = dict(vectors)

    @property
    def set_names(self) -> list[str]:
        return sorted(self._sets)

    def has_set(self, name: str) -> bool:
        return name in self._sets

    def dim(self, name: str) -> int:
        vectors = self._require_set(name)
        first = next(iter(vectors.values()))
        return int(first.shape[0])

    def _require_set(self, name: str) -> dict[str, np.ndarray]:
        if name not in self._sets:
            raise MissingEmbeddingError(
                f"no embedding set {name!r} (have: {', '.join(self.set_names) or 'none'})"
            )
        return self._sets[name]

    def vector(self, name: str, clip_id: str) -> np.ndarray:
        vectors = self._require_set(name)
        if clip_id not in vectors:
            raise MissingEmbeddingError(f"set {name!r} has no embedding for clip {clip_id!r}")
        return vectors[clip_id]

    def has_vector(self, name: str, clip_id: str) -> bool:
        return name in self._sets and clip_id in self._sets[name]

    def subset(self, name: str, clip_ids) -> dict[str, np.ndarray]:
        vectors = self._require_set(name)
        out = {}
        for clip_id in clip_ids:
            if clip_id not in vectors:
                raise MissingEmbeddingError(f"set {name!r} has no embedding for clip {clip_id!r}")
            out[clip_id] = vectors[clip_id]
        return out

    def resolve(self, name: str, temporal_mode: TemporalMode) -> str:
        """Actual set name for the requested temporal mode."""
        if temporal_mode == TemporalMode.FULL_VIDEO:
            return name
        variant = name + MIDDLE_VARIANT_SUFFIX
        if not self.has_set(variant):
            raise MissingEmbeddingError(
                f"set {name!r} has no middle-frame variant; ingest per-frame embeddings first"
            )
        return variant


class Gallery:
    """Immutable candidate set with lazily built per-set index views."""

    def __init__(self, ids, catalog: EmbeddingCatalog):
        self.ids: tuple[str, ...] = tuple(sorted(set(ids)))
        self.catalog = catalog
        self._indexes: dict[str, GalleryIndex] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.ids)

    def index(self, set_name: str) -> GalleryIndex:
        with self._lock:
            idx = self._indexes.get(set_name)
            if idx is None:
                idx = GalleryIndex(self.catalog.subset(set_name, self.ids))
                self._indexes[set_name] = idx
            return idx


@dataclass
class PipelineConfig:
    strategy: Strategy = Strategy.TWO_STAGE
    n_c: int = DEFAULT_NUM_CANDIDATES
    filter_source: str = "visual"
    rank_source: str = "visual"
    temporal_mode: TemporalMode = TemporalMode.FULL_VIDEO
    text_source: TextSource = TextSource.PREDICTED_CAPTION
    include_query_clip: bool = False

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        self.temporal_mode = TemporalMode(self.temporal_mode)
        self.text_source = TextSource(self.text_source)
        if self.n_c < 1:
            raise ValueError("n_c must be >= 1")


@dataclass
class RetrievalOutcome:
    query_id: str
    ranking: RankedList
    stage1_candidates: frozenset[str] | None = None
    stage1_ranking: RankedList | None = None  # candidate block with visual scores
    target_caption_used: TargetCaption | None = None
    resolved_text: str | None = None

    def to_payload(self) -> dict:
        return {
            "query_id": self.query_id,
            "ranking": self.ranking.to_payload(),
            "stage1_candidates": sorted(self.stage1_candidates) if self.stage1_candidates is not None else None,
            "target_caption": self.target_caption_used.text if self.target_caption_used else None,
            "resolved_text": self.resolved_text,
        }


def _exclusions(query: ComposedQuery, cfg: PipelineConfig) -> set[str]:
    return set() if cfg.include_query_clip else {query.query_clip}


def _query_vector(query: ComposedQuery, gallery: Gallery, set_name: str) -> np.ndarray:
    """The query clip's own embedding in the given set (explicit one wins)."""
    if query.visual_embedding is not None:
        return query.visual_embedding
    return gallery.catalog.vector(set_name, query.query_clip)


def _with_embeddings(query: ComposedQuery, gallery: Gallery, cfg: PipelineConfig,
                     providers: ProviderSet | None) -> ComposedQuery:
    """Fill the embeddings the fusion strategy needs, from catalog/providers."""
    rank_set = gallery.catalog.resolve(cfg.rank_source, cfg.temporal_mode)
    visual = query.visual_embedding
    instruction = query.instruction_embedding
    if cfg.strategy in (Strategy.VISUAL_ONLY, Strategy.AVERAGE) and visual is None:
        visual = gallery.catalog.vector(rank_set, query.query_clip)
    if cfg.strategy in (Strategy.TEXT_ONLY, Strategy.AVERAGE) and instruction is None:
        if providers is None or providers.text_embedder is None:
            raise MissingEmbeddingError(
                f"query {query.query_id!r} has no instruction embedding and no text embedder"
            )
        instruction = embed_text(query.instruction_text, providers.text_embedder,
                                 expect_dim=gallery.catalog.dim(rank_set))
    return replace(query, visual_embedding=visual, instruction_embedding=instruction)


def baseline_rank(query: ComposedQuery, gallery: Gallery, cfg: PipelineConfig,
                  providers: ProviderSet | None = None) -> RetrievalOutcome:
    """Single-vector fusion ranking (text-only / visual-only / average)."""
    if cfg.strategy not in VECTOR_STRATEGIES:
        raise UnsupportedStrategyError(f"baseline_rank cannot run {cfg.strategy.value}")
    resolved = _with_embeddings(query, gallery, cfg, providers)
    query_vec = fuse(cfg.strategy, resolved)
    index = gallery.index(gallery.catalog.resolve(cfg.rank_source, cfg.temporal_mode))
    ranking = brute_force_rank(index, query_vec, exclude=_exclusions(query, cfg))
    return RetrievalOutcome(query_id=query.query_id, ranking=ranking)


def _resolve_text(query: ComposedQuery, cfg: PipelineConfig, providers: ProviderSet,
                  narrations: dict[str, str] | None) -> tuple[str, TargetCaption | None]:
    if cfg.text_source == TextSource.INSTRUCTION:
        return query.instruction_text, None
    if cfg.text_source == TextSource.GROUND_TRUTH_CAPTION:
        table = narrations or {}
        for target_id in sorted(query.target_ids):
            text = table.get(target_id, "").strip()
            if text:
                return text, None
        raise MissingNarrationError(
            f"query {query.query_id!r}: no narration table entry for targets "
            f"{sorted(query.target_ids)}"
        )
    caption = caption_video(query.query_clip, providers.require_captioner())
    composed = compose_target_caption(
        caption, query.instruction_text, providers.require_template(),
        providers.require_reformulator(),
    )
    return composed.text, composed


def caption_rank(query: ComposedQuery, gallery: Gallery, cfg: PipelineConfig,
                 providers: ProviderSet, narrations: dict[str, str] | None = None) -> RetrievalOutcome:
    """Rank the whole gallery by similarity to the composed target caption."""
    text, composed = _resolve_text(query, cfg, providers, narrations)
    rank_set = gallery.catalog.resolve(cfg.rank_source, cfg.temporal_mode)
    text_vec = embed_text(text, providers.require_text_embedder(),
                          expect_dim=gallery.catalog.dim(rank_set))
    ranking = brute_force_rank(gallery.index(rank_set), text_vec,
                               exclude=_exclusions(query, cfg))
    return RetrievalOutcome(query_id=query.query_id, ranking=ranking,
                            target_caption_used=composed, resolved_text=text)


def _visual_ranking(query: ComposedQuery, gallery: Gallery, cfg: PipelineConfig) -> RankedList:
    filter_set = gallery.catalog.resolve(cfg.filter_source, cfg.temporal_mode)
    index = gallery.index(filter_set)
    query_vec = _query_vector(query, gallery, filter_set)
    return brute_force_rank(index, query_vec, exclude=_exclusions(query, cfg))


def visual_filter(query: ComposedQuery, gallery: Gallery, n_c: int,
                  filter_source: str, *, cfg: PipelineConfig | None = None) -> set[str]:
    """Ids of the n_c clips visually closest to the query video."""
    base = cfg or PipelineConfig(strategy=Strategy.TWO_STAGE)
    local_cfg = replace(base, filter_source=filter_source, n_c=n_c)
    stage1 = _visual_ranking(query, gallery, local_cfg)
    return set(stage1.ids[:n_c])


def two_stage_rank(query: ComposedQuery, gallery: Gallery, cfg: PipelineConfig,
                   providers: ProviderSet, narrations: dict[str, str] | None = None) -> RetrievalOutcome:
    """Visual candidate filter, then caption-composed re-ranking.

    The first min(n_c, candidates) entries re-rank the visual candidates by
    text similarity; clips outside the candidate set follow in stage-1 order
    so recall stays defined for k beyond n_c.
    """
    if cfg.strategy != Strategy.TWO_STAGE:
        raise UnsupportedStrategyError(f"two_stage_rank cannot run {cfg.strategy.value}")
    stage1 = _visual_ranking(query, gallery, cfg)
    candidates = list(stage1.ids[:cfg.n_c])
    candidate_set = frozenset(candidates)

    text, composed = _resolve_text(query, cfg, providers, narrations)
    rank_set = gallery.catalog.resolve(cfg.rank_source, cfg.temporal_mode)
    rank_index = gallery.index(rank_set)
    text_vec = embed_text(text, providers.require_text_embedder(),
                          expect_dim=gallery.catalog.dim(rank_set))
    scores = rank_index.scores(text_vec)
    position = {clip_id: i for i, clip_id in enumerate(rank_index.ids)}

    head = [(clip_id, float(scores[position[clip_id]])) for clip_id in candidates]
    head.sort(key=lambda pair: (-pair[1], pair[0]))
    tail = [e for e in stage1 if e.clip_id not in candidate_set]

    entries = tuple(ScoredEntry(cid, s) for cid, s in head) + tuple(tail)
    return RetrievalOutcome(
        query_id=query.query_id,
        ranking=RankedList(entries),
        stage1_candidates=candidate_set,
        stage1_ranking=stage1.truncate(cfg.n_c),
        target_caption_used=composed,
        resolved_text=text,
    )


def run_pipeline(query: ComposedQuery, gallery: Gallery, cfg: PipelineConfig,
                 providers: ProviderSet | None = None,
                 narrations: dict[str, str] | None = None) -> RetrievalOutcome:
    """Dispatch a query through the configured strategy."""
    if cfg.strategy in VECTOR_STRATEGIES:
        return baseline_rank(query, gallery, cfg, providers)
    if providers is None:
        raise UnsupportedStrategyError(f"{cfg.strategy.value} needs providers")
    if cfg.strategy == Strategy.CAPTIONING:
        return caption_rank(query, gallery, cfg, providers, narrations)
    if cfg.strategy == Strategy.TWO_STAGE:
        return two_stage_rank(query, gallery, cfg, providers, narrations)
    raise UnsupportedStrategyError(f"unknown strategy {cfg.strategy!r}")
