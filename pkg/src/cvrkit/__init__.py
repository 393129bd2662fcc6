"""Composed video retrieval engine and benchmark harness.

Retrieval over precomputed embeddings: vector-fusion baselines, caption
composition through pluggable caption/LLM/text-embedding providers, a
two-stage visually-filtered re-ranking pipeline, gallery and distractor
construction, and a Recall@k evaluation harness.
"""

from .embedding import (
    FrameEmbeddings,
    cosine_similarity,
    l2_normalize,
    mean_pool_frames,
    middle_frame_index,
    uniform_frame_indices,
)
from .engine import Engine
from .evaluation import EvalConfig, EvalSetting, RecallTable, evaluate, hit_at_k, recall_at_k
from .fusion import ComposedQuery, Strategy, fuse, fuse_average
from .index import GalleryIndex, RankedList, ScoredEntry, brute_force_rank
from .pipeline import (
    EmbeddingCatalog,
    Gallery,
    PipelineConfig,
    RetrievalOutcome,
    baseline_rank,
    caption_rank,
    run_pipeline,
    two_stage_rank,
    visual_filter,
)

__version__ = "0.1.0"

__all__ = [
    "ComposedQuery",
    "EmbeddingCatalog",
    "Engine",
    "EvalConfig",
    "EvalSetting",
    "FrameEmbeddings",
    "Gallery",
    "GalleryIndex",
    "PipelineConfig",
    "RankedList",
    "RecallTable",
    "RetrievalOutcome",
    "ScoredEntry",
    "Strategy",
    "baseline_rank",
    "brute_force_rank",
    "caption_rank",
    "cosine_similarity",
    "evaluate",
    "fuse",
    "fuse_average",
    "hit_at_k",
    "l2_normalize",
    "mean_pool_frames",
    "middle_frame_index",
    "recall_at_k",
    "run_pipeline",
    "two_stage_rank",
    "uniform_frame_indices",
    "visual_filter",
]
