import json
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor

import httpx
import numpy as np
import pytest

from cvrkit.errors import (
    ConfigError,
    DimMismatchError,
    EmptyResponseError,
    MalformedResponseError,
    ProviderUnavailableError,
)
from cvrkit.prompts import (
    CLASSIFY_TEMPLATE_ID,
    COMPOSE_TEMPLATE_ID,
    INSTRUCTION_TEMPLATE_ID,
    load_template,
)
from cvrkit.providers import (
    CLASS_OBJECT,
    CLASS_TEMPORAL,
    Caption,
    CaptionSource,
    FileTransport,
    HttpTransport,
    MockTransport,
    ProviderClient,
    ProviderKind,
    ResponseCache,
    caption_video,
    classify_instruction,
    compose_target_caption,
    embed_text,
    generate_instruction,
)

from conftest import make_mock_providers, write_jsonl_file


class TestPromptTemplates:
    def test_compose_template_carries_fifteen_examples(self):
        template = load_template(COMPOSE_TEMPLATE_ID)
        assert len(template.examples) == 15
        pairs = {(ex["inputs"]["caption"], ex["inputs"]["instruction"]): ex["output"]
                 for ex in template.examples}
        assert pairs[("#C C picks up the jug.", "The person is cleaning.")] == "#C C cleans the jug."
        assert pairs[("#C C pours the water in the shoe.", "Rinse it instead.")] == "#C C rinses the shoe."

    def test_instruction_template_examples(self):
        template = load_template(INSTRUCTION_TEMPLATE_ID)
        assert len(template.examples) == 15
        pairs = {(ex["inputs"]["source_narration"], ex["inputs"]["target_narration"]): ex["output"]
                 for ex in template.examples}
        assert pairs[("#C C picks up the jug.", "#C C cleans the jug.")] == "The person is cleaning."
        assert pairs[("#C C puts down penetrant oil", "#C C sprays the oil")] == "Spray it."

    def test_classifier_template_examples(self):
        template = load_template(CLASSIFY_TEMPLATE_ID)
        answers = {ex["inputs"]["instruction"]: ex["output"] for ex in template.examples}
        assert answers["pick it up instead."] == "yes"
        assert answers["cut the carrot instead."] == "no"

    def test_render_layout_and_determinism(self):
        template = load_template(COMPOSE_TEMPLATE_ID)
        prompt = template.render(caption="#C C lifts the pot.", instruction="Stir it instead.")
        blocks = prompt.split("\n\n")
        assert blocks[0] == template.task_preamble
        assert len(blocks) == 1 + len(template.examples) + 1
        first = blocks[1].splitlines()
        assert first[0].startswith("Source Narration: ")
        assert first[1].startswith("Instruction: ")
        assert first[2].startswith("Target Narration: ")
        # the query block ends with an empty output slot
        assert blocks[-1].splitlines()[-1] == "Target Narration:"
        assert prompt == template.render(caption="#C C lifts the pot.", instruction="Stir it instead.")

    def test_unknown_field_rejected(self):
        template = load_template(COMPOSE_TEMPLATE_ID)
        with pytest.raises(ConfigError):
            template.render(wrong_field="x")


class TestResponseCache:
    def test_key_sensitivity(self):
        body = {"caption": "a", "instruction": "b"}
        base = ResponseCache.key("reformulator/compose", "1", body)
        assert base == ResponseCache.key("reformulator/compose", "1", dict(body))
        assert base != ResponseCache.key("reformulator/compose", "2", body)
        assert base != ResponseCache.key("captioner/caption", "1", body)
        assert base != ResponseCache.key("reformulator/compose", "1", {**body, "caption": "c"})

    def test_disk_cache_round_trip(self, tmp_path):
        cache = ResponseCache(tmp_path)
        key = ResponseCache.key("k", "v", {"x": 1})
        assert cache.get(key) is None
        cache.put(key, b'{"y": 2}')
        assert cache.get(key) == b'{"y": 2}'
        # one file per digest, raw bytes as content
        files = [p for p in tmp_path.rglob("*") if p.is_file()]
        assert len(files) == 1
        assert files[0].read_bytes() == b'{"y": 2}'

    def test_cache_hit_returns_first_response_bytes(self, tmp_path):
        cache = ResponseCache(tmp_path)
        client = ProviderClient(
            ProviderKind.CAPTIONER, MockTransport(ProviderKind.CAPTIONER, 5), cache
        )
        first = caption_video("clip_a", client)
        again = caption_video("clip_a", client)
        assert first == again
        assert client.stats.invocations == 1
        assert client.stats.cache_hits == 1


class TestMockProviders:
    def test_caption_deterministic_across_clients(self):
        a = make_mock_providers(seed=3)
        b = make_mock_providers(seed=3)
        cap_a = caption_video("clip_42", a.captioner)
        cap_b = caption_video("clip_42", b.captioner)
        assert cap_a.text == cap_b.text
        assert cap_a.source == CaptionSource.PREDICTED
        assert cap_a.text.startswith("#C C ")

    def test_different_seeds_differ_somewhere(self):
        a = make_mock_providers(seed=3)
        b = make_mock_providers(seed=4)
        texts_a = [caption_video(f"c{i}", a.captioner).text for i in range(10)]
        texts_b = [caption_video(f"c{i}", b.captioner).text for i in range(10)]
        assert texts_a != texts_b

    def test_compose_is_concatenation_contract(self, mock_providers):
        caption = Caption(text="#C C stirs the pot.", source=CaptionSource.PREDICTED)
        composed = compose_target_caption(
            caption, "use a spoon.", mock_providers.compose_template,
            mock_providers.reformulator,
        )
        assert composed.text == "#C C stirs the pot. | use a spoon."
        assert composed.derived_from == (caption, "use a spoon.")

    def test_embed_unit_norm_and_cache(self, mock_providers):
        v1 = embed_text("wash the pan", mock_providers.text_embedder)
        v2 = embed_text("wash the pan", mock_providers.text_embedder)
        assert np.array_equal(v1, v2)
        assert abs(float(np.linalg.norm(v1.astype(np.float64))) - 1.0) <= 1e-6
        assert mock_providers.text_embedder.stats.invocations == 1

    def test_embed_whitespace_canonicalization_shares_cache(self, mock_providers):
        v1 = embed_text("wash  the   pan", mock_providers.text_embedder)
        v2 = embed_text(" wash the pan ", mock_providers.text_embedder)
        assert np.array_equal(v1, v2)

    def test_embed_dim_check(self, mock_providers):
        with pytest.raises(DimMismatchError):
            embed_text("anything", mock_providers.text_embedder, expect_dim=7)

    def test_classify_deterministic(self, mock_providers):
        first = classify_instruction("pick it up instead.", mock_providers.classifier)
        assert first in (CLASS_TEMPORAL, CLASS_OBJECT)
        assert classify_instruction("pick it up instead.", mock_providers.classifier) == first

    def test_generate_instruction_diff_style(self, mock_providers):
        out = generate_instruction(
            "#C C picks up the jug.", "#C C cleans the jug.",
            load_template(INSTRUCTION_TEMPLATE_ID), mock_providers.reformulator,
        )
        assert out == "make it: cleans"

    def test_kind_mismatch_rejected(self, mock_providers):
        with pytest.raises(ConfigError):
            caption_video("c1", mock_providers.reformulator)
        with pytest.raises(ConfigError):
            embed_text("t", mock_providers.classifier)

    def test_empty_text_rejected(self, mock_providers):
        with pytest.raises(EmptyResponseError):
            embed_text("   ", mock_providers.text_embedder)

    def test_mock_embedding_identical_across_processes(self):
        code = (
            "import json, numpy as np\n"
            "from cvrkit.providers import MockTransport, ProviderKind\n"
            "t = MockTransport(ProviderKind.TEXT_EMBEDDER, 7, dim=16)\n"
            "print(json.dumps([float(x) for x in t.embed_vector('rinse the bowl')]))\n"
        )
        out = subprocess.run([sys.executable, "-c", code], capture_output=True,
                             text=True, check=True)
        child = np.array(json.loads(out.stdout), dtype=np.float32)
        local = MockTransport(ProviderKind.TEXT_EMBEDDER, 7, dim=16).embed_vector("rinse the bowl")
        assert np.array_equal(child, local)


class TestFileLookupProviders:
    def test_caption_table(self, tmp_path):
        table = write_jsonl_file(tmp_path / "caps.jsonl", [
            {"clip_id": "c1", "caption": "#C C opens the drawer."},
        ])
        client = ProviderClient(
            ProviderKind.CAPTIONER, FileTransport(ProviderKind.CAPTIONER, table), ResponseCache()
        )
        assert caption_video("c1", client).text == "#C C opens the drawer."
        with pytest.raises(ProviderUnavailableError):
            caption_video("missing", client)

    def test_compose_table_reproduces_reference_pairs(self, tmp_path, mock_providers):
        # Reference mappings carried by the packaged template data.
        template = load_template(COMPOSE_TEMPLATE_ID)
        records = [
            {"caption": ex["inputs"]["caption"], "instruction": ex["inputs"]["instruction"],
             "target_caption": ex["output"]}
            for ex in template.examples
        ]
        table = write_jsonl_file(tmp_path / "compose.jsonl", records)
        client = ProviderClient(
            ProviderKind.REFORMULATOR, FileTransport(ProviderKind.REFORMULATOR, table),
            ResponseCache(),
        )
        jug = compose_target_caption(
            Caption("#C C picks up the jug.", CaptionSource.PREDICTED),
            "The person is cleaning.", template, client,
        )
        assert jug.text == "#C C cleans the jug."
        shoe = compose_target_caption(
            Caption("#C C pours the water in the shoe.", CaptionSource.PREDICTED),
            "Rinse it instead.", template, client,
        )
        assert shoe.text == "#C C rinses the shoe."

    def test_embedding_table_returns_exact_stored_vector(self, tmp_path):
        stored = [0.5, 0.5, 0.5, 0.5]  # exactly unit norm, survives normalize bit-for-bit
        table = write_jsonl_file(tmp_path / "emb.jsonl", [{"text": "rinse it", "vector": stored}])
        client = ProviderClient(
            ProviderKind.TEXT_EMBEDDER, FileTransport(ProviderKind.TEXT_EMBEDDER, table),
            ResponseCache(),
        )
        assert embed_text("rinse it", client).tolist() == stored

    def test_label_table_classification(self, tmp_path):
        table = write_jsonl_file(tmp_path / "labels.jsonl", [
            {"instruction": "pick it up instead.", "temporal": True},
            {"instruction": "cut the carrot instead.", "temporal": False},
        ])
        client = ProviderClient(
            ProviderKind.CLASSIFIER, FileTransport(ProviderKind.CLASSIFIER, table), ResponseCache()
        )
        assert classify_instruction("pick it up instead.", client) == CLASS_TEMPORAL
        assert classify_instruction("cut the carrot instead.", client) == CLASS_OBJECT

    def test_generate_table(self, tmp_path):
        template = load_template(INSTRUCTION_TEMPLATE_ID)
        records = [
            {"source_narration": ex["inputs"]["source_narration"],
             "target_narration": ex["inputs"]["target_narration"],
             "instruction": ex["output"]}
            for ex in template.examples
        ]
        table = write_jsonl_file(tmp_path / "gen.jsonl", records)
        client = ProviderClient(
            ProviderKind.REFORMULATOR, FileTransport(ProviderKind.REFORMULATOR, table),
            ResponseCache(),
        )
        assert generate_instruction(
            "#C C picks up the jug.", "#C C cleans the jug.", template, client
        ) == "The person is cleaning."
        assert generate_instruction(
            "#C C puts down penetrant oil", "#C C sprays the oil", template, client
        ) == "Spray it."


class TestHttpTransport:
    def _client(self, handler, retries=3):
        transport = httpx.MockTransport(handler)
        http_client = httpx.Client(transport=transport, base_url="http://provider.test")
        sleeps = []
        return (
            HttpTransport("http://provider.test", retries=retries,
                          backoff_s=0.01, client=http_client, sleeper=sleeps.append),
            sleeps,
        )

    def test_success_round_trip(self):
        def handler(request):
            assert request.url.path == "/caption"
            body = json.loads(request.content)
            return httpx.Response(200, json={"caption": f"#C C uses {body['clip_id']}."})

        transport, _ = self._client(handler)
        client = ProviderClient(ProviderKind.CAPTIONER, transport, ResponseCache())
        assert caption_video("c9", client).text == "#C C uses c9."

    def test_retries_then_success_with_backoff(self):
        calls = []

        def handler(request):
            calls.append(1)
            if len(calls) < 3:
                return httpx.Response(500, json={"detail": "overloaded"})
            return httpx.Response(200, json={"caption": "#C C recovers."})

        transport, sleeps = self._client(handler)
        client = ProviderClient(ProviderKind.CAPTIONER, transport, ResponseCache())
        assert caption_video("c1", client).text == "#C C recovers."
        assert len(calls) == 3
        assert sleeps == [0.01, 0.02]  # exponential backoff

    def test_gives_up_after_bounded_retries(self):
        calls = []

        def handler(request):
            calls.append(1)
            return httpx.Response(503, json={"detail": "down"})

        transport, _ = self._client(handler, retries=3)
        client = ProviderClient(ProviderKind.CAPTIONER, transport, ResponseCache())
        with pytest.raises(ProviderUnavailableError):
            caption_video("c1", client)
        assert len(calls) == 4  # initial attempt + 3 retries

    def test_malformed_response(self):
        def handler(request):
            return httpx.Response(200, content=b"not json")

        transport, _ = self._client(handler)
        client = ProviderClient(ProviderKind.CAPTIONER, transport, ResponseCache())
        with pytest.raises(MalformedResponseError):
            caption_video("c1", client)

    def test_missing_field_is_malformed(self):
        def handler(request):
            return httpx.Response(200, json={"unexpected": 1})

        transport, _ = self._client(handler)
        client = ProviderClient(ProviderKind.CAPTIONER, transport, ResponseCache())
        with pytest.raises(MalformedResponseError):
            caption_video("c1", client)

    def test_auth_token_read_from_environment(self, monkeypatch):
        monkeypatch.setenv("CVRKIT_TEST_TOKEN", "sesame")
        transport = HttpTransport("http://provider.test",
                                  auth_token_env="CVRKIT_TEST_TOKEN")
        assert transport._client.headers["authorization"] == "Bearer sesame"

    def test_missing_auth_token_fails_fast(self, monkeypatch):
        monkeypatch.delenv("CVRKIT_ABSENT_TOKEN", raising=False)
        with pytest.raises(ConfigError, match="CVRKIT_ABSENT_TOKEN"):
            HttpTransport("http://provider.test", auth_token_env="CVRKIT_ABSENT_TOKEN")


class TestConcurrency:
    def test_concurrent_identical_requests_single_invocation_per_key(self, tmp_path):
        cache = ResponseCache(tmp_path)
        client = ProviderClient(
            ProviderKind.TEXT_EMBEDDER, MockTransport(ProviderKind.TEXT_EMBEDDER, 1, dim=8),
            cache, max_in_flight=4,
        )
        texts = [f"narration {i % 5}" for i in range(40)]
        with ThreadPoolExecutor(max_workers=8) as pool:
            vecs = list(pool.map(lambda t: embed_text(t, client), texts))
        # 5 unique keys; concurrent duplicates may race the cache but results agree
        for i, text in enumerate(texts):
            assert np.array_equal(vecs[i], vecs[texts.index(text)])
        assert client.stats.invocations + client.stats.cache_hits == 40
        assert client.stats.invocations >= 5
