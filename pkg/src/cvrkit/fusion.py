"""Query construction: the composed query and the embedding fusion strategies."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .embedding import l2_normalize
from .errors import (
    DimMismatchError,
    MissingEmbeddingError,
    UnsupportedStrategyError,
    ZeroVectorError,
)


class Strategy(str, enum.Enum):
    """How a composed query is turned into a gallery ranking.

    The first three resolve to a single query vector. CAPTIONING ranks by a
    composed target caption and TWO_STAGE adds a visual candidate filter in
    front of it; both are handled by the pipeline, not by fuse().
    """

    TEXT_ONLY = "text_only"
    VISUAL_ONLY = "visual_only"
    AVERAGE = "average"
    CAPTIONING = "captioning"
    TWO_STAGE = "two_stage"


#: Strategies that reduce to one query vector scored against the gallery.
VECTOR_STRATEGIES = (Strategy.TEXT_ONLY, Strategy.VISUAL_ONLY, Strategy.AVERAGE)


@dataclass
class ComposedQuery:
    """A (query video, modification instruction) pair with its ground truth."""

    query_id: str
    query_clip: str
    instruction_text: str
    target_ids: frozenset[str]
    local_gallery_ids: frozenset[str] = frozenset()
    visual_embedding: np.ndarray | None = None
    instruction_embedding: np.ndarray | None = None
    instruction_class: str | None = None  # "temporal" | "object_centred"
    source_video_id: str | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.target_ids = frozenset(self.target_ids)
        self.local_gallery_ids = frozenset(self.local_gallery_ids)
        if not self.target_ids:
            raise ValueError(f"query {self.query_id!r} has no targets")
        if self.query_clip in self.target_ids:
            raise ValueError(f"query {self.query_id!r} lists its own clip as a target")
        if self.local_gallery_ids and not self.target_ids <= self.local_gallery_ids:
            missing = sorted(self.target_ids - self.local_gallery_ids)
            raise ValueError(
                f"query {self.query_id!r} targets missing from its local gallery: {missing}"
            )


def fuse_average(visual, text) -> np.ndarray:
    """Unit-normalized midpoint of the two (normalized) modality embeddings."""
    v = l2_normalize(visual)
    t = l2_normalize(text)
    if v.shape != t.shape:
        raise DimMismatchError(f"dim mismatch: {v.shape[0]} vs {t.shape[0]}")
    mean = (v.astype(np.float64) + t.astype(np.float64)) / 2.0
    try:
        return l2_normalize(mean)
    except ZeroVectorError:
        raise ZeroVectorError("average of antipodal embeddings is the zero vector") from None


def fuse(strategy: Strategy, query: ComposedQuery) -> np.ndarray:
    """Resolve the query vector for a vector strategy."""
    if strategy == Strategy.TEXT_ONLY:
        if query.instruction_embedding is None:
            raise MissingEmbeddingError(f"query {query.query_id!r} has no instruction embedding")
        return l2_normalize(query.instruction_embedding)
    if strategy == Strategy.VISUAL_ONLY:
        if query.visual_embedding is None:
            raise MissingEmbeddingError(f"query {query.query_id!r} has no visual embedding")
        return l2_normalize(query.visual_embedding)
    if strategy == Strategy.AVERAGE:
        if query.visual_embedding is None or query.instruction_embedding is None:
            raise MissingEmbeddingError(
                f"query {query.query_id!r} needs both embeddings for average fusion"
            )
        return fuse_average(query.visual_embedding, query.instruction_embedding)
    raise UnsupportedStrategyError(
        f"{strategy.value} does not resolve to a single query vector; use the pipeline"
    )
