"""Runtime facade: loads the manifest and embedding stores once, wires
providers, and exposes rank / evaluate / ablate / gallery / distractor
operations to the service and CLI."""

from __future__ import annotations

import threading
from dataclasses import replace

import numpy as np

from .benchmark import (
    BenchmarkManifest,
    DistractorPool,
    build_global_gallery_ids,
    build_local_gallery,
    sample_all_distractors,
)
from .config import RunConfig, build_provider_set
from .errors import ConfigError, MissingClipError
from .evaluation import (
    EvalConfig,
    EvalSetting,
    RecallTable,
    ablation_sweep_nc,
    evaluate,
)
from .formats import ingest, load_caption_table, load_label_table, load_manifest, read_embeddings
from .formats import materialize_embedding_sets
from .fusion import ComposedQuery, Strategy
from .pipeline import (
    EmbeddingCatalog,
    Gallery,
    PipelineConfig,
    RetrievalOutcome,
    TextSource,
    run_pipeline,
)
from .providers import ProviderSet, ResponseCache, classify_instruction, embed_text


class Engine:
    """One loaded benchmark plus its providers; safe for concurrent readers."""

    def __init__(self, config: RunConfig):
        self.config = config
        self._lock = threading.Lock()
        self._manifest: BenchmarkManifest | None = None
        self._catalog: EmbeddingCatalog | None = None
        self._providers: ProviderSet | None = None
        self._cache = ResponseCache(config.cache_dir)
        self._pools: dict[int, dict[str, DistractorPool]] = {}
        self._narration_vecs: dict[str, np.ndarray] | None = None
        self._global_gallery: dict[int, Gallery] = {}

    # -- lazy stores --------------------------------------------------------

    @property
    def manifest(self) -> BenchmarkManifest:
        with self._lock:
            if self._manifest is None:
                if not self.config.manifest:
                    raise ConfigError("no manifest configured")
                manifest = load_manifest(self.config.manifest)
                if self.config.instruction_labels:
                    manifest.labels.update(load_label_table(self.config.instruction_labels))
                self._manifest = manifest
            return self._manifest

    @property
    def catalog(self) -> EmbeddingCatalog:
        with self._lock:
            if self._catalog is None:
                if not self.config.embeddings:
                    raise ConfigError("no embedding sets configured")
                catalog = EmbeddingCatalog()
                for name, path in sorted(self.config.embeddings.items()):
                    raw = read_embeddings(path)
                    for set_name, vectors in materialize_embedding_sets(name, raw).items():
                        catalog.add_set(set_name, vectors)
                self._catalog = catalog
            return self._catalog

    @property
    def providers(self) -> ProviderSet:
        with self._lock:
            if self._providers is None:
                self._providers = build_provider_set(self.config, self._cache)
            return self._providers

    @property
    def narrations(self) -> dict[str, str]:
        table = {c.clip_id: c.narration for c in self.manifest.clips.values()}
        if self.config.captions:
            # A caption table overrides manifest narrations as the GT source.
            table.update(load_caption_table(self.config.captions))
        return table

    # -- benchmark assembly --------------------------------------------------

    def narration_embeddings(self) -> dict[str, np.ndarray]:
        """Narration vectors for distractor ranking, via the text embedder."""
        if self._narration_vecs is None:
            embedder = self.providers.require_text_embedder()
            vecs = {}
            for clip_id, entry in sorted(self.manifest.clips.items()):
                if entry.narration.strip():
                    vecs[clip_id] = embed_text(entry.narration, embedder)
            self._narration_vecs = vecs
        return self._narration_vecs

    def distractor_pools(self, seed: int | None = None) -> dict[str, DistractorPool]:
        seed = self.config.seed if seed is None else seed
        if seed not in self._pools:
            self._pools[seed] = sample_all_distractors(
                self.manifest, self.narration_embeddings(), seed
            )
        return self._pools[seed]

    def _needs_pools(self) -> bool:
        return any(not q.local_gallery_ids for q in self.manifest.queries)

    def pools_if_needed(self, seed: int | None = None) -> dict[str, DistractorPool] | None:
        return self.distractor_pools(seed) if self._needs_pools() else None

    def global_gallery(self, seed: int | None = None) -> Gallery:
        seed = self.config.seed if seed is None else seed
        if seed not in self._global_gallery:
            ids = build_global_gallery_ids(self.manifest, self.pools_if_needed(seed))
            self._global_gallery[seed] = Gallery(ids, self.catalog)
        return self._global_gallery[seed]

    def local_gallery(self, query: ComposedQuery, seed: int | None = None) -> Gallery:
        ids = query.local_gallery_ids or build_local_gallery(
            query, self.manifest, self.distractor_pools(seed)
        )
        return Gallery(ids, self.catalog)

    def query_by_id(self, query_id: str) -> ComposedQuery:
        for q in self.manifest.queries:
            if q.query_id == query_id:
                return q
        raise MissingClipError(f"unknown query id {query_id!r}")

    @staticmethod
    def _parse(enum_cls, value, what: str):
        try:
            return enum_cls(value)
        except ValueError:
            choices = ", ".join(e.value for e in enum_cls)
            raise ConfigError(f"unknown {what} {value!r}; expected one of: {choices}")

    def _pipeline_cfg(self, *, strategy: str | None = None, n_c: int | None = None,
                      text_source: str | None = None) -> PipelineConfig:
        cfg = self.config.pipeline
        updates = {}
        if strategy is not None:
            updates["strategy"] = self._parse(Strategy, strategy, "strategy")
        if n_c is not None:
            updates["n_c"] = n_c
        if text_source is not None:
            updates["text_source"] = self._parse(TextSource, text_source, "text source")
        return replace(cfg, **updates) if updates else cfg

    # -- operations ----------------------------------------------------------

    def rank(self, query_id: str, *, setting: str | None = None,
             strategy: str | None = None, n_c: int | None = None,
             text_source: str | None = None) -> tuple[RetrievalOutcome, int]:
        """Run one query; returns the outcome and the searched gallery size."""
        query = self.query_by_id(query_id)
        setting_val = self._parse(EvalSetting, setting or self.config.eval_setting, "setting")
        gallery = (
            self.global_gallery() if setting_val == EvalSetting.GLOBAL
            else self.local_gallery(query)
        )
        cfg = self._pipeline_cfg(strategy=strategy, n_c=n_c, text_source=text_source)
        outcome = run_pipeline(query, gallery, cfg, self.providers, self.narrations)
        return outcome, len(gallery)

    def evaluate(self, *, setting: str | None = None, strategy: str | None = None,
                 ks: tuple[int, ...] | None = None, subset_filter: str | None = None,
                 workers: int | None = None, n_c: int | None = None,
                 text_source: str | None = None) -> RecallTable:
        pipeline = self._pipeline_cfg(strategy=strategy, n_c=n_c, text_source=text_source)
        cfg = EvalConfig(
            setting=self._parse(EvalSetting, setting or self.config.eval_setting, "setting"),
            pipeline=pipeline,
            ks=tuple(ks) if ks else self.config.eval_ks,
            subset_filter=subset_filter if subset_filter is not None else self.config.eval_subset_filter,
            workers=workers or self.config.workers,
        )
        return evaluate(
            self.manifest, self.catalog, cfg, self.providers,
            pools=self.pools_if_needed(), narrations=self.narrations,
            seed=self.config.seed, label=pipeline.strategy.value,
        )

    def ablate_nc(self, nc_values: list[int], *, setting: str | None = None,
                  workers: int | None = None) -> dict[int, RecallTable]:
        pipeline = self._pipeline_cfg(strategy=Strategy.TWO_STAGE.value)
        cfg = EvalConfig(
            setting=self._parse(EvalSetting, setting or self.config.eval_setting, "setting"),
            pipeline=pipeline,
            ks=self.config.eval_ks,
            workers=workers or self.config.workers,
        )
        return ablation_sweep_nc(
            self.manifest, self.catalog, cfg, nc_values, self.providers,
            pools=self.pools_if_needed(), narrations=self.narrations,
            seed=self.config.seed,
        )

    def label_instructions(self) -> dict[str, str]:
        """Classify unlabeled query instructions via the classifier provider."""
        classifier = self.providers.require_classifier()
        labels = dict(self.manifest.labels)
        for q in self.manifest.queries:
            if q.query_id not in labels:
                labels[q.query_id] = classify_instruction(q.instruction_text, classifier)
        self.manifest.labels.update(labels)
        return labels

    def gallery_summary(self, setting: str) -> dict:
        setting_val = self._parse(EvalSetting, setting, "setting")
        if setting_val == EvalSetting.GLOBAL:
            gallery = self.global_gallery()
            # Per-query size excludes the query's own clip when present.
            sizes = [
                len(gallery) - (1 if q.query_clip in set(gallery.ids) else 0)
                for q in self.manifest.queries
            ]
        else:
            sizes = [len(self.local_gallery(q)) for q in self.manifest.queries]
        return {
            "setting": setting_val.value,
            "queries": len(self.manifest.queries),
            "min_size": min(sizes) if sizes else 0,
            "max_size": max(sizes) if sizes else 0,
            "mean_size": (sum(sizes) / len(sizes)) if sizes else 0.0,
        }

    def ingest(self, embeddings: dict[str, str] | None = None,
               manifest_path: str | None = None, out_dir: str | None = None):
        return ingest(
            embeddings or self.config.embeddings,
            manifest_path or self.config.manifest,
            out_dir,
        )

    def stats(self) -> dict:
        payload: dict = {"seed": self.config.seed}
        try:
            payload["queries"] = len(self.manifest.queries)
            payload["clips"] = len(self.manifest.clips)
            payload["mean_targets_per_query"] = self.manifest.mean_targets_per_query
        except ConfigError:
            payload["queries"] = payload["clips"] = None
        try:
            payload["embedding_sets"] = self.catalog.set_names
        except ConfigError:
            payload["embedding_sets"] = []
        return payload
