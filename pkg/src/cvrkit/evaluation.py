"""Recall@k evaluation over global and local galleries, with subset
breakdowns, candidate-count ablation sweeps, and serialized reports.

A query with several ground-truth targets counts as one hit as soon as any
target appears in the top k. Failed queries count as misses; the fraction of
queries that ran without provider errors is reported separately as coverage.
"""

from __future__ import annotations

import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from .benchmark import BenchmarkManifest, DistractorPool, build_local_gallery
from .benchmark import build_global_gallery_ids
from .errors import (
    EmptyResponseError,
    EmptySequenceError,
    MalformedResponseError,
    MissingNarrationError,
    ProviderUnavailableError,
)
from .fusion import ComposedQuery
from .index import RankedList
from .pipeline import EmbeddingCatalog, Gallery, PipelineConfig, run_pipeline
from .providers import ProviderSet

log = logging.getLogger(__name__)

# Errors that abort one query instead of the whole run.
PER_QUERY_ERRORS = (
    ProviderUnavailableError,
    MalformedResponseError,
    EmptyResponseError,
    MissingNarrationError,
)

SUBSET_ALL = "all"


class EvalSetting(str, enum.Enum):
    GLOBAL = "global"
    LOCAL = "local"


DEFAULT_KS = {
    EvalSetting.GLOBAL: (1, 5, 10),
    EvalSetting.LOCAL: (1, 2, 3),
}


@dataclass
class EvalConfig:
    setting: EvalSetting = EvalSetting.GLOBAL
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    ks: tuple[int, ...] = ()
    subset_filter: str | None = None
    workers: int = 1

    def __post_init__(self):
        self.setting = EvalSetting(self.setting)
        self.ks = tuple(self.ks) or DEFAULT_KS[self.setting]
        if any(k < 1 for k in self.ks) or list(self.ks) != sorted(set(self.ks)):
            raise ValueError(f"ks must be strictly increasing positive integers, got {self.ks}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass(frozen=True)
class QueryResult:
    query_id: str
    hit_rank: int | None  # 1-based rank of the first retrieved target
    gallery_size: int = 0
    subset: str | None = None
    error: str | None = None

    def __post_init__(self):
        if self.hit_rank is not None and self.hit_rank < 1:
            raise ValueError("hit_rank must be >= 1 when present")


def _ranking_ids(ranking: RankedList | Sequence[str]) -> Sequence[str]:
    return ranking.ids if isinstance(ranking, RankedList) else ranking


def hit_at_k(ranking: RankedList | Sequence[str], targets: Iterable[str], k: int) -> bool:
    """True iff any target appears among the first k entries (one hit max)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    wanted = set(targets)
    if not wanted:
        raise EmptySequenceError("targets must be non-empty")
    ids = _ranking_ids(ranking)
    for clip_id in ids[:k]:
        if clip_id in wanted:
            return True
    return False


def first_hit_rank(ranking: RankedList | Sequence[str], targets: Iterable[str]) -> int | None:
    wanted = set(targets)
    for pos, clip_id in enumerate(_ranking_ids(ranking), start=1):
        if clip_id in wanted:
            return pos
    return None


def recall_at_k(
    rankings: Sequence[RankedList | Sequence[str] | None],
    targets_per_query: Sequence[Iterable[str]],
    k: int,
) -> float:
    """Fraction of queries whose top k contains a target; None rankings miss."""
    if not rankings:
        raise EmptySequenceError("no queries to evaluate")
    if len(rankings) != len(targets_per_query):
        raise ValueError("rankings and targets_per_query lengths differ")
    hits = sum(
        1
        for ranking, targets in zip(rankings, targets_per_query)
        if ranking is not None and hit_at_k(ranking, targets, k)
    )
    return hits / len(rankings)


@dataclass
class SubsetRecall:
    queries: int
    failures: int
    recalls: dict[int, float]

    @property
    def coverage(self) -> float:
        return 1.0 if self.queries == 0 else (self.queries - self.failures) / self.queries


@dataclass
class RecallTable:
    label: str
    setting: str
    strategy: str
    ks: tuple[int, ...]
    subsets: dict[str, SubsetRecall]
    seed: int | None = None
    query_results: tuple[QueryResult, ...] = ()

    def recall(self, k: int, subset: str = SUBSET_ALL) -> float:
        return self.subsets[subset].recalls[k]

    def to_payload(self, *, include_queries: bool = True) -> dict:
        payload = {
            "label": self.label,
            "setting": self.setting,
            "strategy": self.strategy,
            "ks": list(self.ks),
            "seed": self.seed,
            "subsets": {
                name: {
                    "queries": s.queries,
                    "failures": s.failures,
                    "coverage": s.coverage,
                    "recalls": {str(k): v for k, v in s.recalls.items()},
                }
                for name, s in self.subsets.items()
            },
        }
        if include_queries:
            payload["query_results"] = [
                {
                    "query_id": r.query_id,
                    "hit_rank": r.hit_rank,
                    "gallery_size": r.gallery_size,
                    "subset": r.subset,
                    "error": r.error,
                }
                for r in self.query_results
            ]
        return payload

    @classmethod
    def from_payload(cls, payload: dict) -> "RecallTable":
        return cls(
            label=payload["label"],
            setting=payload["setting"],
            strategy=payload["strategy"],
            ks=tuple(payload["ks"]),
            seed=payload.get("seed"),
            subsets={
                name: SubsetRecall(
                    queries=s["queries"],
                    failures=s["failures"],
                    recalls={int(k): v for k, v in s["recalls"].items()},
                )
                for name, s in payload["subsets"].items()
            },
            query_results=tuple(
                QueryResult(
                    query_id=r["query_id"],
                    hit_rank=r["hit_rank"],
                    gallery_size=r["gallery_size"],
                    subset=r.get("subset"),
                    error=r.get("error"),
                )
                for r in payload.get("query_results", ())
            ),
        )


def _aggregate(results: Sequence[QueryResult], ks: tuple[int, ...]) -> dict[str, SubsetRecall]:
    """Deterministic fold over query_id-sorted results into subset tables."""
    ordered = sorted(results, key=lambda r: r.query_id)
    subset_names = [SUBSET_ALL] + sorted({r.subset for r in ordered if r.subset})
    tables: dict[str, SubsetRecall] = {}
    for name in subset_names:
        rows = ordered if name == SUBSET_ALL else [r for r in ordered if r.subset == name]
        recalls: dict[int, float] = {}
        for k in ks:
            if not rows:
                recalls[k] = 0.0
                continue
            hits = sum(1 for r in rows if r.hit_rank is not None and r.hit_rank <= k)
            recalls[k] = hits / len(rows)
        tables[name] = SubsetRecall(
            queries=len(rows),
            failures=sum(1 for r in rows if r.error is not None),
            recalls=recalls,
        )
    return tables


def _query_label(query: ComposedQuery, manifest: BenchmarkManifest) -> str | None:
    return query.instruction_class or manifest.labels.get(query.query_id)


def evaluate(
    manifest: BenchmarkManifest,
    catalog: EmbeddingCatalog,
    cfg: EvalConfig,
    providers: ProviderSet | None = None,
    *,
    pools: dict[str, DistractorPool] | None = None,
    narrations: dict[str, str] | None = None,
    seed: int | None = None,
    label: str | None = None,
) -> RecallTable:
    """Run the configured pipeline per query and aggregate Recall@k."""
    queries = list(manifest.queries)
    if cfg.subset_filter:
        queries = [q for q in queries if _query_label(q, manifest) == cfg.subset_filter]
    if not queries:
        return RecallTable(
            label=label or cfg.pipeline.strategy.value,
            setting=cfg.setting.value,
            strategy=cfg.pipeline.strategy.value,
            ks=cfg.ks,
            subsets={SUBSET_ALL: SubsetRecall(0, 0, {k: 0.0 for k in cfg.ks})},
            seed=seed,
        )

    if narrations is None:
        narrations = {c.clip_id: c.narration for c in manifest.clips.values()}

    global_gallery: Gallery | None = None
    if cfg.setting == EvalSetting.GLOBAL:
        global_gallery = Gallery(build_global_gallery_ids(manifest, pools), catalog)

    def query_gallery(query: ComposedQuery) -> Gallery:
        if global_gallery is not None:
            return global_gallery
        ids = query.local_gallery_ids or build_local_gallery(query, manifest, pools or {})
        return Gallery(ids, catalog)

    max_k = max(cfg.ks)

    def run_one(query: ComposedQuery) -> QueryResult:
        gallery = query_gallery(query)
        size = len(gallery) - (0 if cfg.pipeline.include_query_clip or
                               query.query_clip not in gallery.ids else 1)
        if size < max_k:
            log.warning(
                "query %s: gallery size %d < max k %d; k is clamped",
                query.query_id, size, max_k,
            )
        try:
            outcome = run_pipeline(query, gallery, cfg.pipeline, providers, narrations)
        except PER_QUERY_ERRORS as exc:
            return QueryResult(
                query_id=query.query_id, hit_rank=None, gallery_size=size,
                subset=_query_label(query, manifest), error=f"{type(exc).__name__}: {exc}",
            )
        return QueryResult(
            query_id=query.query_id,
            hit_rank=outcome.ranking.first_hit_rank(query.target_ids),
            gallery_size=size,
            subset=_query_label(query, manifest),
        )

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(run_one, queries))
    else:
        results = [run_one(q) for q in queries]

    results.sort(key=lambda r: r.query_id)
    return RecallTable(
        label=label or cfg.pipeline.strategy.value,
        setting=cfg.setting.value,
        strategy=cfg.pipeline.strategy.value,
        ks=cfg.ks,
        subsets=_aggregate(results, cfg.ks),
        seed=seed,
        query_results=tuple(results),
    )


def ablation_sweep_nc(
    manifest: BenchmarkManifest,
    catalog: EmbeddingCatalog,
    base_cfg: EvalConfig,
    nc_values: Sequence[int],
    providers: ProviderSet,
    **kwargs,
) -> dict[int, RecallTable]:
    """One evaluation per candidate count, reusing warm provider caches."""
    tables: dict[int, RecallTable] = {}
    for n_c in nc_values:
        cfg = replace(base_cfg, pipeline=replace(base_cfg.pipeline, n_c=n_c))
        tables[n_c] = evaluate(
            manifest, catalog, cfg, providers,
            label=f"{base_cfg.pipeline.strategy.value}[n_c={n_c}]", **kwargs,
        )
    return tables


# ---------------------------------------------------------------------------
# Report serialization


def serialize_report(tables: Sequence[RecallTable], *, seed: int | None = None,
                     config_echo: dict | None = None) -> dict:
    """Machine-readable report; percentages stay raw fractions."""
    return {
        "schema_version": 1,
        "seed": seed,
        "config": config_echo,
        "tables": [t.to_payload() for t in tables],
    }


def parse_report(payload: dict) -> list[RecallTable]:
    if payload.get("schema_version") != 1:
        raise ValueError(f"unsupported report schema: {payload.get('schema_version')!r}")
    return [RecallTable.from_payload(p) for p in payload["tables"]]


def render_text(tables: Sequence[RecallTable], subset: str = SUBSET_ALL) -> str:
    """Aligned text table: one row per pipeline label, columns per setting."""
    settings = [s for s in ("global", "local") if any(t.setting == s for t in tables)]
    ks_by_setting = {
        s: next(t.ks for t in tables if t.setting == s) for s in settings
    }
    labels: list[str] = []
    for t in tables:
        if t.label not in labels:
            labels.append(t.label)

    header = ["method"]
    for s in settings:
        header.extend(f"{s[:1].upper()}-R@{k}" for k in ks_by_setting[s])
    header.extend(["queries", "coverage"])

    rows = [header]
    for lab in labels:
        row = [lab]
        queries = coverage = None
        for s in settings:
            table = next((t for t in tables if t.label == lab and t.setting == s), None)
            for k in ks_by_setting[s]:
                if table is None or subset not in table.subsets:
                    row.append("-")
                else:
                    row.append(f"{100.0 * table.recall(k, subset):.1f}")
            if table is not None and subset in table.subsets:
                queries = table.subsets[subset].queries
                coverage = table.subsets[subset].coverage
        row.append(str(queries) if queries is not None else "-")
        row.append(f"{100.0 * coverage:.1f}" if coverage is not None else "-")
        rows.append(row)

    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[j]) for j, cell in enumerate(row)).rstrip())
        if i == 0:
            lines.append("-" * len(lines[0]))
    return "\n".join(lines) + "\n"
