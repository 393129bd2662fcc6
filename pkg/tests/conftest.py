"""Shared fixtures: deterministic providers and synthetic benchmarks."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import pytest

from cvrkit.benchmark import BenchmarkManifest, ClipManifestEntry
from cvrkit.fusion import ComposedQuery
from cvrkit.pipeline import EmbeddingCatalog
from cvrkit.prompts import COMPOSE_TEMPLATE_ID, load_template
from cvrkit.providers import (
    MockTransport,
    ProviderClient,
    ProviderKind,
    ProviderSet,
    ResponseCache,
    caption_video,
    compose_target_caption,
)


def scalar_cosine(a, b) -> float:
    """Pure-python cosine oracle, independent of numpy vector paths."""
    dot = sum(float(x) * float(y) for x, y in zip(a, b))
    na = math.sqrt(sum(float(x) ** 2 for x in a))
    nb = math.sqrt(sum(float(y) ** 2 for y in b))
    return dot / (na * nb)


def make_mock_providers(dim: int = 32, seed: int = 7,
                        cache: ResponseCache | None = None) -> ProviderSet:
    cache = cache or ResponseCache()
    def client(kind: ProviderKind, **kw) -> ProviderClient:
        return ProviderClient(kind, MockTransport(kind, seed, **kw), cache)

    return ProviderSet(
        captioner=client(ProviderKind.CAPTIONER),
        reformulator=client(ProviderKind.REFORMULATOR),
        text_embedder=client(ProviderKind.TEXT_EMBEDDER, dim=dim),
        classifier=client(ProviderKind.CLASSIFIER),
        compose_template=load_template(COMPOSE_TEMPLATE_ID),
    )


def clip(clip_id: str, video: str, start: float, end: float, narration: str = "",
         **flags) -> ClipManifestEntry:
    return ClipManifestEntry(
        clip_id=clip_id, source_video_id=video, start_s=start, end_s=end,
        narration=narration or f"#C C handles the {clip_id}.", **flags,
    )


class SyntheticBenchmark:
    """Cluster-structured benchmark where the composed caption's mock text
    embedding is each target's unique nearest neighbor in the rank space,
    while a planted distractor outranks the target visually for a chosen
    fraction of queries."""

    def __init__(self, providers: ProviderSet, *, num_queries: int = 50, dim: int = 128,
                 seed: int = 1234, visually_hidden_fraction: float = 0.7,
                 distractors_per_query: int = 4):
        rng = np.random.default_rng(seed)
        self.providers = providers
        self.dim = dim
        clips: dict[str, ClipManifestEntry] = {}
        queries: list[ComposedQuery] = []
        visual: dict[str, np.ndarray] = {}
        rank: dict[str, np.ndarray] = {}
        self.hidden: set[str] = set()

        def unit(vec):
            return vec / np.linalg.norm(vec)

        for qi in range(num_queries):
            video = f"v{qi:03d}"
            qid = f"q{qi:03d}"
            query_clip = f"{video}_query"
            target_clip = f"{video}_target"
            axis = unit(rng.standard_normal(dim))

            def near(base, spread):
                noise = rng.standard_normal(dim)
                noise -= noise.dot(base) * base
                return unit(base + spread * unit(noise))

            visual[query_clip] = axis
            visual[target_clip] = near(axis, 0.45)  # cos ~0.912
            member_ids = [query_clip, target_clip]
            hidden = qi < int(round(visually_hidden_fraction * num_queries))
            for di in range(distractors_per_query):
                did = f"{video}_d{di}"
                member_ids.append(did)
                if di == 0 and hidden:
                    visual[did] = near(axis, 0.2)  # cos ~0.98, beats the target
                else:
                    visual[did] = near(axis, 0.55 + 0.05 * di)
            if hidden:
                self.hidden.add(qid)

            instruction = f"perform step {qi} differently."
            caption = caption_video(query_clip, providers.captioner)
            composed = compose_target_caption(
                caption, instruction, providers.compose_template, providers.reformulator
            )
            embedder_transport: MockTransport = providers.text_embedder._transport
            rank[target_clip] = embedder_transport.embed_vector(composed.text)
            for cid in member_ids:
                if cid != target_clip:
                    rank[cid] = unit(rng.standard_normal(dim))

            span = 0.0
            for cid in member_ids:
                clips[cid] = clip(cid, video, span, span + 5.0)
                span += 6.0
            queries.append(ComposedQuery(
                query_id=qid, query_clip=query_clip, instruction_text=instruction,
                target_ids=frozenset({target_clip}),
                local_gallery_ids=frozenset(m for m in member_ids if m != query_clip),
            ))

        self.manifest = BenchmarkManifest(clips=clips, queries=queries)
        self.catalog = EmbeddingCatalog()
        self.catalog.add_set("visual", visual)
        self.catalog.add_set("rank_space", rank)
        self.visual = visual
        self.rank = rank


@pytest.fixture
def mock_providers() -> ProviderSet:
    return make_mock_providers()


@pytest.fixture(scope="session")
def synthetic_benchmark() -> SyntheticBenchmark:
    return SyntheticBenchmark(make_mock_providers(dim=128, seed=99))


def write_jsonl_file(path: Path, records: list[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def materialize_benchmark(root: Path, bench: SyntheticBenchmark, *, provider_seed: int,
                          seed: int = 5, **config_overrides) -> Path:
    """Write manifest, stores and a run config for one synthetic benchmark."""
    from cvrkit.formats import save_manifest, write_embeddings

    root.mkdir(parents=True, exist_ok=True)
    save_manifest(bench.manifest, root / "manifest.jsonl")
    write_embeddings(root / "visual.cvre", bench.visual)
    write_embeddings(root / "rank_space.cvre", bench.rank)
    payload = {
        "seed": seed,
        "workers": 1,
        "manifest": "manifest.jsonl",
        "embeddings": {"visual": "visual.cvre", "rank_space": "rank_space.cvre"},
        "cache_dir": "cache",
        "output_dir": "out",
        "providers": {
            "captioner": {"transport": "mock", "seed": provider_seed},
            "reformulator": {"transport": "mock", "seed": provider_seed},
            "text_embedder": {"transport": "mock", "seed": provider_seed, "dim": bench.dim},
            "classifier": {"transport": "mock", "seed": provider_seed},
        },
        "pipeline": {"strategy": "two_stage", "n_c": 15, "filter_source": "visual",
                     "rank_source": "rank_space", "text_source": "predicted_caption"},
        "eval_setting": "global",
    }
    payload.update(config_overrides)
    config_path = root / "run.json"
    config_path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return config_path
