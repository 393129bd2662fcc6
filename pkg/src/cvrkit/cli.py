"""Command-line client for the retrieval service.

Every subcommand drives the same HTTP interface: against a remote server
when --server is given, otherwise against an in-process app built from
--config, so single commands stay short-lived processes.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import sys
from pathlib import Path

import httpx

from .config import load_run_config
from .errors import CvrkitError


def _parse_kv(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise argparse.ArgumentTypeError(f"expected NAME=PATH, got {pair!r}")
        name, path = pair.split("=", 1)
        out[name] = path
    return out


def _parse_ints(text: str) -> list[int]:
    return [int(v) for v in text.replace(",", " ").split()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cvrkit",
                                     description="composed video retrieval engine client")
    parser.add_argument("--config", required=True, help="run config JSON")
    parser.add_argument("--server", help="base URL of a running service; default runs in-process")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--workers", type=int, help="override the config worker count")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)

    p = sub.add_parser("ingest", help="validate stores and write normalized ones")
    p.add_argument("--embeddings", nargs="*", default=[], metavar="NAME=PATH")
    p.add_argument("--manifest")
    p.add_argument("--out", help="directory for validated stores")

    p = sub.add_parser("build-gallery", help="assemble galleries and print size stats")
    p.add_argument("--setting", choices=["global", "local"], required=True)

    p = sub.add_parser("sample-distractors", help="sample distractor pools")
    p.add_argument("--out", help="write pools JSON here")

    p = sub.add_parser("rank", help="rank one query")
    p.add_argument("--query-id", required=True)
    p.add_argument("--setting", choices=["global", "local"])
    p.add_argument("--strategy")
    p.add_argument("--nc", type=int, dest="n_c")
    p.add_argument("--text-source")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--explain", action="store_true",
                   help="also print the stage-1 candidates and scores")

    p = sub.add_parser("eval", help="evaluate recall and write report files")
    p.add_argument("--setting", choices=["global", "local"])
    p.add_argument("--strategy")
    p.add_argument("--ks", type=_parse_ints)
    p.add_argument("--subset")
    p.add_argument("--nc", type=int, dest="n_c")
    p.add_argument("--text-source")
    p.add_argument("--out", help="report output directory (default: config output_dir)")

    p = sub.add_parser("ablate-nc", help="sweep the candidate count")
    p.add_argument("--values", type=_parse_ints, required=True)
    p.add_argument("--setting", choices=["global", "local"])
    p.add_argument("--out")

    p = sub.add_parser("report", help="render a saved report as a text table")
    p.add_argument("--input", required=True)
    p.add_argument("--subset", default="all")

    sub.add_parser("label-instructions", help="classify instructions via the provider")

    return parser


class ServiceClient:
    def __init__(self, args):
        self._args = args
        self._app = None

    def _build_app(self):
        if self._app is None:
            from .service.app import create_app

            cfg = load_run_config(self._args.config)
            if self._args.seed is not None:
                cfg.seed = self._args.seed
            if self._args.workers is not None:
                cfg.workers = self._args.workers
            self._app = create_app(cfg)
        return self._app

    def post(self, path: str, payload: dict) -> tuple[int, dict]:
        return self.request("POST", path, payload)

    def request(self, method: str, path: str, payload: dict | None = None) -> tuple[int, dict]:
        if self._args.server:
            with httpx.Client(base_url=self._args.server, timeout=3600.0) as client:
                resp = client.request(method, path, json=payload)
                return resp.status_code, resp.json()

        app = self._build_app()

        async def go():
            transport = httpx.ASGITransport(app=app)
            async with httpx.AsyncClient(transport=transport,
                                         base_url="http://cvrkit.local") as client:
                resp = await client.request(method, path, json=payload)
                return resp.status_code, resp.json()

        return asyncio.run(go())


def _fail(detail) -> int:
    print(f"error: {detail}", file=sys.stderr)
    return 1


def _write_report_files(report: dict, text: str, out_dir: Path, stem: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (out_dir / f"{stem}.txt").write_text(text, encoding="utf-8")
    print(f"wrote {out_dir / (stem + '.json')} and .txt")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "serve":
        import uvicorn

        from .service.app import create_app

        cfg = load_run_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.workers is not None:
            cfg.workers = args.workers
        uvicorn.run(create_app(cfg), host=args.host, port=args.port)
        return 0

    try:
        client = ServiceClient(args)

        if args.command == "ingest":
            payload = {
                "embeddings": _parse_kv(args.embeddings) or None,
                "manifest": args.manifest,
                "out_dir": args.out,
            }
            status, body = client.post("/ingest", payload)
            if status != 200:
                return _fail(body.get("detail", body))
            for name, stats in sorted(body["sets"].items()):
                print(f"set {name}: {stats}")
            for diag in body["diagnostics"]:
                print(f"error: {diag}", file=sys.stderr)
            return 0 if body["ok"] else 1

        if args.command == "build-gallery":
            status, body = client.post("/gallery/build", {"setting": args.setting})
            if status != 200:
                return _fail(body.get("detail", body))
            print(json.dumps(body, indent=2, sort_keys=True))
            return 0

        if args.command == "sample-distractors":
            status, body = client.post("/distractors/sample", {"seed": args.seed})
            if status != 200:
                return _fail(body.get("detail", body))
            if args.out:
                Path(args.out).parent.mkdir(parents=True, exist_ok=True)
                Path(args.out).write_text(
                    json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8"
                )
                print(f"wrote {args.out}")
            else:
                print(json.dumps(body, indent=2, sort_keys=True))
            return 0

        if args.command == "rank":
            payload = {
                "query_id": args.query_id,
                "setting": args.setting,
                "strategy": args.strategy,
                "n_c": args.n_c,
                "text_source": args.text_source,
                "k": args.k,
                "explain": args.explain,
            }
            status, body = client.post("/rank", payload)
            if status != 200:
                return _fail(body.get("detail", body))
            print(f"query {body['query_id']}  gallery={body['gallery_size']}  "
                  f"targets={','.join(body['target_ids'])}  hit_rank={body['hit_rank']}")
            if body.get("target_caption"):
                print(f"composed caption: {body['target_caption']}")
            elif body.get("resolved_text"):
                print(f"ranking text: {body['resolved_text']}")
            if args.explain and body.get("stage1_ranking"):
                print("stage-1 visual candidates:")
                for i, e in enumerate(body["stage1_ranking"], start=1):
                    print(f"  {i:>3}  {e['clip_id']}  {e['score']:+.4f}")
            print("final ranking:")
            for i, e in enumerate(body["ranking"], start=1):
                print(f"  {i:>3}  {e['clip_id']}  {e['score']:+.4f}")
            return 0

        if args.command == "eval":
            payload = {
                "setting": args.setting,
                "strategy": args.strategy,
                "ks": args.ks,
                "subset_filter": args.subset,
                "workers": args.workers,
                "n_c": args.n_c,
                "text_source": args.text_source,
            }
            status, body = client.post("/eval", payload)
            if status != 200:
                return _fail(body.get("detail", body))
            print(body["text"], end="")
            out_dir = Path(args.out) if args.out else None
            if out_dir is None:
                _, cfg_body = client.request("GET", "/config")
                out_dir = Path(cfg_body["config"]["output_dir"])
            table = body["report"]["tables"][0]
            stem = f"report_{table['setting']}_{table['strategy']}"
            _write_report_files(body["report"], body["text"], out_dir, stem)
            return 0

        if args.command == "ablate-nc":
            status, body = client.post(
                "/ablate", {"nc_values": args.values, "setting": args.setting,
                            "workers": args.workers}
            )
            if status != 200:
                return _fail(body.get("detail", body))
            print(body["text"], end="")
            if args.out:
                _write_report_files(
                    {"schema_version": 1, "tables": [body["reports"][str(n)] for n in args.values]},
                    body["text"], Path(args.out), "ablation_nc",
                )
            return 0

        if args.command == "report":
            report = json.loads(Path(args.input).read_text("utf-8"))
            status, body = client.post("/report/render", {"report": report, "subset": args.subset})
            if status != 200:
                return _fail(body.get("detail", body))
            print(body["text"], end="")
            return 0

        if args.command == "label-instructions":
            status, body = client.post("/labels", {})
            if status != 200:
                return _fail(body.get("detail", body))
            counts: dict[str, int] = {}
            for label in body["labels"].values():
                counts[label] = counts.get(label, 0) + 1
            print(json.dumps(counts, indent=2, sort_keys=True))
            return 0

        raise AssertionError(f"unhandled command {args.command}")
    except CvrkitError as exc:
        return _fail(exc)
    except httpx.HTTPError as exc:
        return _fail(f"transport failure: {exc}")


if __name__ == "__main__":
    sys.exit(main())
