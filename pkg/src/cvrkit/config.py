"""Run configuration: paths, provider endpoints, pipeline and eval settings.

Configs are JSON files; relative paths resolve against the config file's
directory. The effective (resolved) config is echoed into every report and
re-parses to an equal config.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .benchmark import derive_seed
from .errors import ConfigError
from .evaluation import EvalConfig, EvalSetting
from .pipeline import PipelineConfig
from .prompts import COMPOSE_TEMPLATE_ID, PromptTemplate, load_template, load_template_file
from .providers import (
    FileTransport,
    HttpTransport,
    MockTransport,
    ProviderClient,
    ProviderKind,
    ProviderSet,
    ResponseCache,
)

TRANSPORTS = ("mock", "http", "file")


@dataclass
class ProviderEndpointConfig:
    transport: str = "mock"
    base_url: str | None = None
    path: str | None = None  # lookup table for the file transport
    timeout_s: float = 30.0
    retries: int = 3
    backoff_s: float = 0.25
    max_in_flight: int = 4
    auth_token_env: str | None = None  # env var holding a bearer token (http)
    seed: int | None = None  # mock transport; defaults to a kind-derived seed
    dim: int | None = None  # text embedder output dim

    def __post_init__(self):
        if self.transport not in TRANSPORTS:
            raise ConfigError(f"unknown transport {self.transport!r}; expected one of {TRANSPORTS}")
        if self.transport == "http" and not self.base_url:
            raise ConfigError("http transport needs base_url")
        if self.transport == "file" and not self.path:
            raise ConfigError("file transport needs path")


@dataclass
class RunConfig:
    seed: int = 0
    workers: int = 1
    manifest: str | None = None
    embeddings: dict[str, str] = field(default_factory=dict)
    captions: str | None = None  # clip caption table (JSONL)
    instruction_labels: str | None = None  # query_id -> class table (JSONL)
    cache_dir: str | None = None
    output_dir: str = "out"
    compose_template: str | None = None  # custom template file; packaged default otherwise
    providers: dict[str, ProviderEndpointConfig] = field(default_factory=dict)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    eval_setting: str = EvalSetting.GLOBAL.value
    eval_ks: tuple[int, ...] = ()
    eval_subset_filter: str | None = None

    def __post_init__(self):
        for kind in self.providers:
            if kind not in {k.value for k in ProviderKind}:
                raise ConfigError(f"unknown provider kind {kind!r}")

    def eval_config(self, **overrides) -> EvalConfig:
        base = {
            "setting": self.eval_setting,
            "ks": self.eval_ks,
            "subset_filter": self.eval_subset_filter,
            "workers": self.workers,
            "pipeline": self.pipeline,
        }
        base.update({k: v for k, v in overrides.items() if v is not None})
        return EvalConfig(**base)

    def to_payload(self) -> dict:
        payload = asdict(self)
        payload["pipeline"] = {
            "strategy": self.pipeline.strategy.value,
            "n_c": self.pipeline.n_c,
            "filter_source": self.pipeline.filter_source,
            "rank_source": self.pipeline.rank_source,
            "temporal_mode": self.pipeline.temporal_mode.value,
            "text_source": self.pipeline.text_source.value,
            "include_query_clip": self.pipeline.include_query_clip,
        }
        payload["eval_ks"] = list(self.eval_ks)
        return payload

    @classmethod
    def from_payload(cls, payload: dict, base_dir: Path | None = None) -> "RunConfig":
        data = dict(payload)
        providers = {
            kind: ProviderEndpointConfig(**spec)
            for kind, spec in (data.pop("providers", {}) or {}).items()
        }
        pipeline = PipelineConfig(**(data.pop("pipeline", {}) or {}))
        data["eval_ks"] = tuple(data.get("eval_ks") or ())
        known = {f for f in cls.__dataclass_fields__}  # tolerate no extras
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(providers=providers, pipeline=pipeline,
                  **{k: v for k, v in data.items() if k not in ("providers", "pipeline")})
        if base_dir is not None:
            cfg._resolve_paths(base_dir)
        return cfg

    def _resolve_paths(self, base_dir: Path) -> None:
        def resolve(value: str | None) -> str | None:
            if value is None:
                return None
            p = Path(value)
            return str(p if p.is_absolute() else (base_dir / p).resolve())

        self.manifest = resolve(self.manifest)
        self.captions = resolve(self.captions)
        self.instruction_labels = resolve(self.instruction_labels)
        self.cache_dir = resolve(self.cache_dir)
        self.output_dir = resolve(self.output_dir) or "out"
        self.compose_template = resolve(self.compose_template)
        self.embeddings = {name: resolve(path) for name, path in self.embeddings.items()}
        for endpoint in self.providers.values():
            endpoint.path = resolve(endpoint.path)

    def validate_paths(self) -> None:
        """Fail fast when a referenced input file does not exist."""
        missing = []
        for label, value in [
            ("manifest", self.manifest),
            ("captions", self.captions),
            ("instruction_labels", self.instruction_labels),
            ("compose_template", self.compose_template),
            *[(f"embeddings[{n}]", p) for n, p in self.embeddings.items()],
            *[(f"providers[{k}].path", e.path) for k, e in self.providers.items()],
        ]:
            if value is not None and not Path(value).exists():
                missing.append(f"{label}: {value}")
        if missing:
            raise ConfigError("unresolvable paths:\n  " + "\n  ".join(missing))


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        payload = json.loads(path.read_text("utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}")
    try:
        cfg = RunConfig.from_payload(payload, base_dir=path.parent.resolve())
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}")
    cfg.validate_paths()
    return cfg


def build_provider_set(cfg: RunConfig, cache: ResponseCache | None = None) -> ProviderSet:
    """Instantiate provider clients from endpoint configs, sharing one cache."""
    cache = cache or ResponseCache(cfg.cache_dir)
    clients: dict[ProviderKind, ProviderClient] = {}
    endpoints = dict(cfg.providers)
    # A caption table doubles as a file-transport captioner.
    if "captioner" not in endpoints and cfg.captions:
        endpoints["captioner"] = ProviderEndpointConfig(transport="file", path=cfg.captions)

    for kind_name, endpoint in endpoints.items():
        kind = ProviderKind(kind_name)
        if endpoint.transport == "http":
            transport = HttpTransport(
                endpoint.base_url, timeout=endpoint.timeout_s,
                retries=endpoint.retries, backoff_s=endpoint.backoff_s,
                auth_token_env=endpoint.auth_token_env,
            )
        elif endpoint.transport == "file":
            transport = FileTransport(kind, endpoint.path)
        else:
            seed = endpoint.seed
            if seed is None:
                seed = derive_seed(cfg.seed, "provider", kind.value)
            transport = MockTransport(kind, seed, dim=endpoint.dim)
        clients[kind] = ProviderClient(kind, transport, cache,
                                       max_in_flight=endpoint.max_in_flight)

    if cfg.compose_template:
        template: PromptTemplate = load_template_file(cfg.compose_template)
    else:
        template = load_template(COMPOSE_TEMPLATE_ID)

    return ProviderSet(
        captioner=clients.get(ProviderKind.CAPTIONER),
        reformulator=clients.get(ProviderKind.REFORMULATOR),
        text_embedder=clients.get(ProviderKind.TEXT_EMBEDDER),
        classifier=clients.get(ProviderKind.CLASSIFIER),
        compose_template=template,
    )
