"""FastAPI service wrapping the retrieval engine.

The engine (manifest, embedding stores, providers, caches) is created once
per app and shared across requests; all engine state is immutable or
internally synchronized after load.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException
from fastapi.responses import JSONResponse

from ..config import RunConfig
from ..engine import Engine
from ..errors import CvrkitError, MissingClipError
from ..evaluation import parse_report, render_text, serialize_report
from ..index import RankedList
from . import schemas


def _entries(ranking: RankedList) -> list[schemas.ScoredEntryModel]:
    return [schemas.ScoredEntryModel(clip_id=e.clip_id, score=e.score) for e in ranking]


def create_app(config: RunConfig) -> FastAPI:
    engine = Engine(config)
    app = FastAPI(title="cvrkit", description="composed video retrieval service")
    app.state.engine = engine

    @app.exception_handler(CvrkitError)
    async def _engine_error(_, exc: CvrkitError):
        status = 404 if isinstance(exc, MissingClipError) else 400
        return JSONResponse(status_code=status, content={"detail": str(exc)})

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        stats = engine.stats()
        return schemas.HealthResponse(
            seed=stats["seed"],
            queries=stats.get("queries"),
            clips=stats.get("clips"),
            mean_targets_per_query=stats.get("mean_targets_per_query"),
            embedding_sets=stats.get("embedding_sets", []),
        )

    @app.get("/config", response_model=schemas.ConfigResponse)
    def config_echo():
        return schemas.ConfigResponse(config=config.to_payload())

    @app.post("/rank", response_model=schemas.RankResponse)
    def rank(req: schemas.RankRequest):
        query = engine.query_by_id(req.query_id)
        outcome, gallery_size = engine.rank(
            req.query_id, setting=req.setting, strategy=req.strategy,
            n_c=req.n_c, text_source=req.text_source,
        )
        ranking = outcome.ranking if req.k is None else outcome.ranking.truncate(req.k)
        return schemas.RankResponse(
            query_id=req.query_id,
            gallery_size=gallery_size,
            ranking=_entries(ranking),
            target_ids=sorted(query.target_ids),
            hit_rank=outcome.ranking.first_hit_rank(query.target_ids),
            stage1_candidates=(
                sorted(outcome.stage1_candidates)
                if req.explain and outcome.stage1_candidates is not None else None
            ),
            stage1_ranking=(
                _entries(outcome.stage1_ranking)
                if req.explain and outcome.stage1_ranking is not None else None
            ),
            target_caption=(
                outcome.target_caption_used.text if outcome.target_caption_used else None
            ),
            resolved_text=outcome.resolved_text,
        )

    @app.post("/eval", response_model=schemas.EvalResponse)
    def run_eval(req: schemas.EvalRequest):
        table = engine.evaluate(
            setting=req.setting, strategy=req.strategy,
            ks=tuple(req.ks) if req.ks else None,
            subset_filter=req.subset_filter, workers=req.workers,
            n_c=req.n_c, text_source=req.text_source,
        )
        report = serialize_report([table], seed=config.seed, config_echo=config.to_payload())
        return schemas.EvalResponse(report=report, text=render_text([table]))

    @app.post("/ablate", response_model=schemas.AblateResponse)
    def ablate(req: schemas.AblateRequest):
        tables = engine.ablate_nc(req.nc_values, setting=req.setting, workers=req.workers)
        ordered = [tables[n] for n in req.nc_values]
        return schemas.AblateResponse(
            reports={str(n): tables[n].to_payload() for n in req.nc_values},
            text=render_text(ordered),
        )

    @app.post("/distractors/sample", response_model=schemas.DistractorsResponse)
    def distractors(req: schemas.DistractorsRequest):
        seed = req.seed if req.seed is not None else config.seed
        pools = engine.distractor_pools(seed)
        wanted = set(req.target_ids) if req.target_ids else None
        return schemas.DistractorsResponse(
            seed=seed,
            pools=[
                schemas.DistractorPoolModel(
                    target_id=p.target_id,
                    candidates=len(p.candidates),
                    selected=list(p.selected),
                )
                for tid, p in sorted(pools.items())
                if wanted is None or tid in wanted
            ],
        )

    @app.post("/gallery/build", response_model=schemas.GalleryBuildResponse)
    def build_gallery(req: schemas.GalleryBuildRequest):
        return schemas.GalleryBuildResponse(**engine.gallery_summary(req.setting))

    @app.post("/ingest", response_model=schemas.IngestResponse)
    def run_ingest(req: schemas.IngestRequest):
        report = engine.ingest(req.embeddings, req.manifest, req.out_dir)
        return schemas.IngestResponse(**report.to_payload())

    @app.post("/labels", response_model=schemas.LabelResponse)
    def labels():
        return schemas.LabelResponse(labels=engine.label_instructions())

    @app.post("/report/render", response_model=schemas.ReportRenderResponse)
    def render(req: schemas.ReportRenderRequest):
        try:
            tables = parse_report(req.report)
        except (KeyError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=f"bad report payload: {exc}")
        return schemas.ReportRenderResponse(text=render_text(tables, subset=req.subset))

    return app


def create_app_from_file(config_path: str) -> FastAPI:
    """Uvicorn factory entry point: CVRKIT_CONFIG=... uvicorn cvrkit.service.app:..."""
    from ..config import load_run_config

    return create_app(load_run_config(config_path))
