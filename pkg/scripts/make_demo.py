#!/usr/bin/env python3
"""Generate a small synthetic benchmark for exercising the CLI end to end.

Builds clustered visual embeddings (one cluster per source video), plants
each target's rank-space embedding at the mock text embedding of its
composed caption, and writes manifest, stores and a ready-to-run config.

Usage: python3 scripts/make_demo.py OUTPUT_DIR [--queries N] [--seed N]
"""

import argparse
import json
from pathlib import Path

import numpy as np

from cvrkit.benchmark import BenchmarkManifest, ClipManifestEntry
from cvrkit.formats import save_manifest, write_embeddings
from cvrkit.fusion import ComposedQuery
from cvrkit.prompts import COMPOSE_TEMPLATE_ID, load_template
from cvrkit.providers import (
    MockTransport,
    ProviderClient,
    ProviderKind,
    ResponseCache,
    caption_video,
    compose_target_caption,
)

DIM = 96
PROVIDER_SEED = 1001


def unit(rng, dim=DIM):
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out", type=Path)
    parser.add_argument("--queries", type=int, default=12)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    cache = ResponseCache()
    captioner = ProviderClient(
        ProviderKind.CAPTIONER, MockTransport(ProviderKind.CAPTIONER, PROVIDER_SEED), cache)
    reformulator = ProviderClient(
        ProviderKind.REFORMULATOR, MockTransport(ProviderKind.REFORMULATOR, PROVIDER_SEED), cache)
    embedder_transport = MockTransport(ProviderKind.TEXT_EMBEDDER, PROVIDER_SEED, dim=DIM)
    template = load_template(COMPOSE_TEMPLATE_ID)

    clips: dict[str, ClipManifestEntry] = {}
    queries: list[ComposedQuery] = []
    visual: dict[str, np.ndarray] = {}
    rank: dict[str, np.ndarray] = {}

    for qi in range(args.queries):
        video = f"v{qi:03d}"
        axis = unit(rng)

        def near(spread):
            noise = rng.standard_normal(DIM)
            noise -= noise.dot(axis) * axis
            vec = axis + spread * noise / np.linalg.norm(noise)
            return vec / np.linalg.norm(vec)

        members = {
            f"{video}_query": axis,
            f"{video}_target": near(0.45),
            f"{video}_d0": near(0.2),  # visually closer than the target
            f"{video}_d1": near(0.6),
            f"{video}_d2": near(0.7),
        }
        visual.update(members)

        instruction = f"adjust step {qi} next."
        caption = caption_video(f"{video}_query", captioner)
        composed = compose_target_caption(caption, instruction, template, reformulator)
        for cid in members:
            rank[cid] = embedder_transport.embed_vector(composed.text) \
                if cid.endswith("_target") else unit(rng)

        span = 0.0
        for cid in members:
            clips[cid] = ClipManifestEntry(
                clip_id=cid, source_video_id=video, start_s=span, end_s=span + 5.0,
                narration=f"#C C works on part {cid}.",
                is_query=cid.endswith("_query"), is_target=cid.endswith("_target"),
            )
            span += 6.0
        queries.append(ComposedQuery(
            query_id=f"q{qi:03d}", query_clip=f"{video}_query",
            instruction_text=instruction,
            target_ids=frozenset({f"{video}_target"}),
            local_gallery_ids=frozenset(c for c in members if not c.endswith("_query")),
        ))

    args.out.mkdir(parents=True, exist_ok=True)
    save_manifest(BenchmarkManifest(clips=clips, queries=queries), args.out / "manifest.jsonl")
    write_embeddings(args.out / "visual.cvre", visual)
    write_embeddings(args.out / "rank_space.cvre", rank)
    config = {
        "seed": args.seed,
        "manifest": "manifest.jsonl",
        "embeddings": {"visual": "visual.cvre", "rank_space": "rank_space.cvre"},
        "cache_dir": "cache",
        "output_dir": "out",
        "providers": {
            "captioner": {"transport": "mock", "seed": PROVIDER_SEED},
            "reformulator": {"transport": "mock", "seed": PROVIDER_SEED},
            "text_embedder": {"transport": "mock", "seed": PROVIDER_SEED, "dim": DIM},
            "classifier": {"transport": "mock", "seed": PROVIDER_SEED},
        },
        "pipeline": {"strategy": "two_stage", "n_c": 15, "filter_source": "visual",
                     "rank_source": "rank_space", "text_source": "predicted_caption"},
        "eval_setting": "global",
    }
    (args.out / "run.json").write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
    print(f"wrote demo benchmark with {len(queries)} queries to {args.out}/")
    print(f"try: cvrkit --config {args.out / 'run.json'} eval")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
