"""Caption, LLM-composition, text-embedding and classification providers.

Every provider call goes through a persistent response cache keyed by a
digest of (kind, template version, canonicalized request body); the cache
stores raw response bytes, so warm runs never touch the transport. Three
transports exist: remote HTTP (bounded retries, exponential backoff),
deterministic mocks (pure functions of inputs and a seed), and static file
tables, which make the whole test suite runnable offline.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import httpx
import numpy as np

from .embedding import as_embedding, l2_normalize
from .errors import (
    ConfigError,
    DimMismatchError,
    EmptyResponseError,
    MalformedResponseError,
    ProviderUnavailableError,
)
from .prompts import PromptTemplate
from .textnorm import canonical_text

CLASS_TEMPORAL = "temporal"
CLASS_OBJECT = "object_centred"


class ProviderKind(str, enum.Enum):
    CAPTIONER = "captioner"
    REFORMULATOR = "reformulator"
    TEXT_EMBEDDER = "text_embedder"
    CLASSIFIER = "classifier"


class CaptionSource(str, enum.Enum):
    PREDICTED = "predicted"
    GROUND_TRUTH = "ground_truth"


@dataclass(frozen=True)
class Caption:
    text: str
    source: CaptionSource

    def __post_init__(self):
        if not self.text.strip():
            raise EmptyResponseError("caption text is empty")
        object.__setattr__(self, "text", canonical_text(self.text))


@dataclass(frozen=True)
class TargetCaption:
    text: str
    derived_from: tuple[Caption, str]  # (source caption, instruction)

    def __post_init__(self):
        if not self.text.strip():
            raise EmptyResponseError("target caption text is empty")
        object.__setattr__(self, "text", canonical_text(self.text))


def canonical_body(body: dict) -> bytes:
    return json.dumps(body, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


class ResponseCache:
    """Digest-addressed response store; one file per request digest.

    With no directory configured the cache lives in memory, which still
    satisfies the invocation-count contracts within a process.
    """

    def __init__(self, cache_dir: str | Path | None = None):
        self._dir = Path(cache_dir) if cache_dir is not None else None
        self._mem: dict[str, bytes] = {}
        self._lock = threading.Lock()

    @staticmethod
    def key(kind: str, template_version: str, body: dict) -> str:
        h = hashlib.sha256()
        h.update(kind.encode("utf-8"))
        h.update(b"\x00")
        h.update(template_version.encode("utf-8"))
        h.update(b"\x00")
        h.update(canonical_body(body))
        return h.hexdigest()

    def _path(self, key: str) -> Path:
        assert self._dir is not None
        return self._dir / key[:2] / key

    def get(self, key: str) -> bytes | None:
        if self._dir is None:
            with self._lock:
                return self._mem.get(key)
        path = self._path(key)
        try:
            return path.read_bytes()
        except FileNotFoundError:
            return None

    def put(self, key: str, payload: bytes) -> None:
        if self._dir is None:
            with self._lock:
                self._mem[key] = payload
            return
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        # Atomic publish: concurrent writers of the same key race harmlessly
        # because responses are deterministic per key.
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
            os.replace(tmp, path)
        except BaseException:
            try:
                os.unlink(tmp)
            except FileNotFoundError:
                pass
            raise


# ---------------------------------------------------------------------------
# Transports


class HttpTransport:
    """POSTs JSON to a provider base URL with bounded retries.

    Auth tokens come from the environment (auth_token_env names the
    variable), never from config files.
    """

    def __init__(self, base_url: str, *, timeout: float = 30.0, retries: int = 3,
                 backoff_s: float = 0.25, auth_token_env: str | None = None,
                 client: httpx.Client | None = None, sleeper=time.sleep):
        headers = {}
        if auth_token_env:
            token = os.environ.get(auth_token_env)
            if not token:
                raise ConfigError(f"auth token variable {auth_token_env!r} is not set")
            headers["Authorization"] = f"Bearer {token}"
        self._client = client or httpx.Client(base_url=base_url, timeout=timeout,
                                              headers=headers)
        self._retries = retries
        self._backoff_s = backoff_s
        self._sleep = sleeper

    def fetch(self, path: str, body: dict) -> bytes:
        last_error: Exception | None = None
        for attempt in range(self._retries + 1):
            if attempt:
                self._sleep(self._backoff_s * (2 ** (attempt - 1)))
            try:
                resp = self._client.post(path, json=body)
            except httpx.HTTPError as exc:
                last_error = exc
                continue
            if resp.status_code >= 500:
                last_error = ProviderUnavailableError(
                    f"{path}: server error {resp.status_code}"
                )
                continue
            if resp.status_code != 200:
                raise MalformedResponseError(f"{path}: unexpected status {resp.status_code}")
            return resp.content
        raise ProviderUnavailableError(
            f"{path}: gave up after {self._retries + 1} attempts: {last_error}"
        )


def _mock_digest(*parts: str) -> bytes:
    h = hashlib.sha256()
    for part in parts:
        h.update(part.encode("utf-8"))
        h.update(b"\x00")
    return h.digest()


_MOCK_VERBS = ("lifts", "wipes", "stirs", "opens", "cuts", "holds", "moves", "turns")
_MOCK_NOUNS = ("jug", "cloth", "bowl", "board", "wrench", "brush", "lid", "tray")


class MockTransport:
    """Deterministic provider stand-in: a pure function of (inputs, seed)."""

    def __init__(self, kind: ProviderKind, seed: int, dim: int | None = None):
        self._kind = kind
        self._seed = seed
        self._dim = dim
        if kind == ProviderKind.TEXT_EMBEDDER and not dim:
            raise ConfigError("mock text embedder needs an embedding dim")

    def embed_vector(self, text: str) -> np.ndarray:
        digest = _mock_digest(str(self._seed), "embed", canonical_text(text))
        rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "big")))
        return l2_normalize(rng.standard_normal(self._dim))

    def fetch(self, path: str, body: dict) -> bytes:
        if path == "/caption":
            digest = _mock_digest(str(self._seed), "caption", body["clip_id"])
            verb = _MOCK_VERBS[digest[0] % len(_MOCK_VERBS)]
            noun = _MOCK_NOUNS[digest[1] % len(_MOCK_NOUNS)]
            tag = digest.hex()[:8]
            response: dict = {"caption": f"#C C {verb} the {noun} ({tag})."}
        elif path == "/compose":
            response = {"target_caption": f"{body['caption']} | {body['instruction']}"}
        elif path == "/generate":
            src = set(canonical_text(body["source_narration"]).split())
            dst = canonical_text(body["target_narration"]).split()
            added = [w for w in dst if w not in src]
            response = {"instruction": "make it: " + (" ".join(added) or "the same")}
        elif path == "/embed":
            vec = self.embed_vector(body["text"])
            response = {"vector": [float(x) for x in vec], "dim": int(vec.shape[0])}
        elif path == "/classify":
            digest = _mock_digest(str(self._seed), "classify", canonical_text(body["instruction"]))
            response = {"temporal": bool(digest[0] % 2)}
        else:
            raise MalformedResponseError(f"mock transport has no route {path!r}")
        return canonical_body(response)


class FileTransport:
    """Serves responses from a static JSONL table, keyed per provider kind."""

    def __init__(self, kind: ProviderKind, table_path: str | Path):
        self._kind = kind
        self._path = Path(table_path)
        self._table: dict[str, dict] = {}
        with self._path.open("r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ConfigError(f"{self._path}: line {line_no}: invalid JSON: {exc}") from exc
                self._table[self._record_key(record, line_no)] = record

    def _record_key(self, record: dict, line_no: int) -> str:
        try:
            if self._kind == ProviderKind.CAPTIONER:
                return record["clip_id"]
            if self._kind == ProviderKind.REFORMULATOR:
                if "target_caption" in record:
                    return canonical_text(record["caption"]) + "\x00" + canonical_text(record["instruction"])
                return (
                    "gen\x00"
                    + canonical_text(record["source_narration"])
                    + "\x00"
                    + canonical_text(record["target_narration"])
                )
            if self._kind == ProviderKind.TEXT_EMBEDDER:
                return canonical_text(record["text"])
            return canonical_text(record["instruction"])
        except KeyError as exc:
            raise ConfigError(f"{self._path}: line {line_no}: missing field {exc}") from exc

    def fetch(self, path: str, body: dict) -> bytes:
        if path == "/caption":
            record = self._table.get(body["clip_id"])
            if record is None:
                raise ProviderUnavailableError(f"{self._path}: no caption for {body['clip_id']!r}")
            return canonical_body({"caption": record["caption"]})
        if path == "/compose":
            key = canonical_text(body["caption"]) + "\x00" + canonical_text(body["instruction"])
            record = self._table.get(key)
            if record is None:
                raise ProviderUnavailableError(
                    f"{self._path}: no composed caption for ({body['caption']!r}, {body['instruction']!r})"
                )
            return canonical_body({"target_caption": record["target_caption"]})
        if path == "/generate":
            key = (
                "gen\x00"
                + canonical_text(body["source_narration"])
                + "\x00"
                + canonical_text(body["target_narration"])
            )
            record = self._table.get(key)
            if record is None:
                raise ProviderUnavailableError(f"{self._path}: no instruction for narration pair")
            return canonical_body({"instruction": record["instruction"]})
        if path == "/embed":
            record = self._table.get(canonical_text(body["text"]))
            if record is None:
                raise ProviderUnavailableError(f"{self._path}: no embedding for {body['text']!r}")
            return canonical_body({"vector": record["vector"], "dim": len(record["vector"])})
        if path == "/classify":
            record = self._table.get(canonical_text(body["instruction"]))
            if record is None:
                raise ProviderUnavailableError(
                    f"{self._path}: no label for {body['instruction']!r}"
                )
            return canonical_body({"temporal": bool(record["temporal"])})
        raise MalformedResponseError(f"file transport has no route {path!r}")


# ---------------------------------------------------------------------------
# Clients


@dataclass
class ProviderStats:
    invocations: int = 0
    cache_hits: int = 0


class ProviderClient:
    """One provider kind behind the cache; counts real transport invocations."""

    def __init__(self, kind: ProviderKind, transport, cache: ResponseCache,
                 *, max_in_flight: int = 4):
        self.kind = kind
        self._transport = transport
        self._cache = cache
        self._gate = threading.Semaphore(max_in_flight)
        self._stats_lock = threading.Lock()
        self.stats = ProviderStats()

    def request(self, path: str, body: dict, template_version: str = "") -> dict:
        key = ResponseCache.key(f"{self.kind.value}{path}", template_version, body)
        cached = self._cache.get(key)
        if cached is not None:
            with self._stats_lock:
                self.stats.cache_hits += 1
            payload = cached
        else:
            with self._gate:
                payload = self._transport.fetch(path, body)
            with self._stats_lock:
                self.stats.invocations += 1
            self._cache.put(key, payload)
        try:
            return json.loads(payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise MalformedResponseError(f"{self.kind.value}: response is not JSON: {exc}") from exc


@dataclass
class ProviderSet:
    """The provider handles one pipeline run needs, sharing a single cache."""

    captioner: ProviderClient | None = None
    reformulator: ProviderClient | None = None
    text_embedder: ProviderClient | None = None
    classifier: ProviderClient | None = None
    compose_template: PromptTemplate | None = None

    def _require(self, kind: ProviderKind, client: ProviderClient | None) -> ProviderClient:
        if client is None:
            raise ConfigError(f"no {kind.value} provider configured")
        return client

    def require_captioner(self) -> ProviderClient:
        return self._require(ProviderKind.CAPTIONER, self.captioner)

    def require_reformulator(self) -> ProviderClient:
        return self._require(ProviderKind.REFORMULATOR, self.reformulator)

    def require_text_embedder(self) -> ProviderClient:
        return self._require(ProviderKind.TEXT_EMBEDDER, self.text_embedder)

    def require_classifier(self) -> ProviderClient:
        return self._require(ProviderKind.CLASSIFIER, self.classifier)

    def require_template(self) -> PromptTemplate:
        if self.compose_template is None:
            raise ConfigError("no compose prompt template configured")
        return self.compose_template


def caption_video(clip_id: str, provider: ProviderClient) -> Caption:
    """Predicted caption of one clip; repeat calls are served from cache."""
    if provider.kind != ProviderKind.CAPTIONER:
        raise ConfigError(f"caption_video needs a captioner, got {provider.kind.value}")
    response = provider.request("/caption", {"clip_id": clip_id})
    if "caption" not in response:
        raise MalformedResponseError("captioner response lacks 'caption'")
    return Caption(text=response["caption"], source=CaptionSource.PREDICTED)


def compose_target_caption(caption: Caption, instruction: str, template: PromptTemplate,
                           provider: ProviderClient) -> TargetCaption:
    """Compose the target-video caption from a clip caption and an instruction."""
    if provider.kind != ProviderKind.REFORMULATOR:
        raise ConfigError(f"compose_target_caption needs a reformulator, got {provider.kind.value}")
    body = {
        "caption": canonical_text(caption.text),
        "instruction": canonical_text(instruction),
        "template_id": template.template_id,
    }
    response = provider.request("/compose", body, template_version=template.version)
    if "target_caption" not in response:
        raise MalformedResponseError("reformulator response lacks 'target_caption'")
    return TargetCaption(text=response["target_caption"],
                         derived_from=(caption, canonical_text(instruction)))


def generate_instruction(source_narration: str, target_narration: str,
                         template: PromptTemplate, provider: ProviderClient) -> str:
    """Concise modification instruction describing the source-to-target change."""
    if provider.kind != ProviderKind.REFORMULATOR:
        raise ConfigError(f"generate_instruction needs a reformulator, got {provider.kind.value}")
    if not source_narration.strip() or not target_narration.strip():
        raise EmptyResponseError("both narrations must be non-empty")
    body = {
        "source_narration": canonical_text(source_narration),
        "target_narration": canonical_text(target_narration),
        "template_id": template.template_id,
    }
    response = provider.request("/generate", body, template_version=template.version)
    if "instruction" not in response:
        raise MalformedResponseError("reformulator response lacks 'instruction'")
    text = canonical_text(response["instruction"])
    if not text:
        raise EmptyResponseError("generated instruction is empty")
    return text


def embed_text(text: str, provider: ProviderClient, *, expect_dim: int | None = None) -> np.ndarray:
    """Unit-normalized text embedding in the provider's configured space."""
    if provider.kind != ProviderKind.TEXT_EMBEDDER:
        raise ConfigError(f"embed_text needs a text embedder, got {provider.kind.value}")
    if not text.strip():
        raise EmptyResponseError("cannot embed empty text")
    response = provider.request("/embed", {"text": canonical_text(text)})
    if "vector" not in response:
        raise MalformedResponseError("embedder response lacks 'vector'")
    vec = l2_normalize(as_embedding(response["vector"], name="text embedding"))
    if expect_dim is not None and vec.shape[0] != expect_dim:
        raise DimMismatchError(f"text embedding dim {vec.shape[0]} != expected {expect_dim}")
    return vec


def classify_instruction(instruction: str, provider: ProviderClient) -> str:
    """CLASS_TEMPORAL iff the provider answers yes, else CLASS_OBJECT."""
    if provider.kind != ProviderKind.CLASSIFIER:
        raise ConfigError(f"classify_instruction needs a classifier, got {provider.kind.value}")
    response = provider.request("/classify", {"instruction": canonical_text(instruction)})
    if "temporal" not in response:
        raise MalformedResponseError("classifier response lacks 'temporal'")
    return CLASS_TEMPORAL if bool(response["temporal"]) else CLASS_OBJECT
