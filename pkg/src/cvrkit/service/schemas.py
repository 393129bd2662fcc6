"""Pydantic request/response models for the retrieval service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str = "ok"
    seed: int
    queries: int | None = None
    clips: int | None = None
    mean_targets_per_query: float | None = None
    embedding_sets: list[str] = Field(default_factory=list)


class ScoredEntryModel(BaseModel):
    clip_id: str
    score: float


class RankRequest(BaseModel):
    query_id: str
    setting: str | None = None
    strategy: str | None = None
    n_c: int | None = Field(default=None, ge=1)
    text_source: str | None = None
    k: int | None = Field(default=None, ge=1)
    explain: bool = False


class RankResponse(BaseModel):
    query_id: str
    gallery_size: int
    ranking: list[ScoredEntryModel]
    target_ids: list[str]
    hit_rank: int | None = None
    stage1_candidates: list[str] | None = None
    stage1_ranking: list[ScoredEntryModel] | None = None
    target_caption: str | None = None
    resolved_text: str | None = None


class EvalRequest(BaseModel):
    setting: str | None = None
    strategy: str | None = None
    ks: list[int] | None = None
    subset_filter: str | None = None
    workers: int | None = Field(default=None, ge=1)
    n_c: int | None = Field(default=None, ge=1)
    text_source: str | None = None


class EvalResponse(BaseModel):
    report: dict
    text: str


class AblateRequest(BaseModel):
    nc_values: list[int] = Field(min_length=1)
    setting: str | None = None
    workers: int | None = Field(default=None, ge=1)


class AblateResponse(BaseModel):
    reports: dict[str, dict]  # n_c (stringified) -> table payload
    text: str


class DistractorsRequest(BaseModel):
    seed: int | None = None
    target_ids: list[str] | None = None


class DistractorPoolModel(BaseModel):
    target_id: str
    candidates: int
    selected: list[str]


class DistractorsResponse(BaseModel):
    seed: int
    pools: list[DistractorPoolModel]


class GalleryBuildRequest(BaseModel):
    setting: str


class GalleryBuildResponse(BaseModel):
    setting: str
    queries: int
    min_size: int
    max_size: int
    mean_size: float


class IngestRequest(BaseModel):
    embeddings: dict[str, str] | None = None
    manifest: str | None = None
    out_dir: str | None = None


class IngestResponse(BaseModel):
    ok: bool
    sets: dict[str, dict]
    diagnostics: list[str]
    manifest_stats: dict | None = None


class LabelResponse(BaseModel):
    labels: dict[str, str]


class ReportRenderRequest(BaseModel):
    report: dict
    subset: str = "all"


class ReportRenderResponse(BaseModel):
    text: str


class ConfigResponse(BaseModel):
    config: dict
