import json
import threading

import httpx
import pytest

from fishai import promptgen
from fishai.errors import ClientFailure, DescribeFailures, EmptyCategory, EmptyResponse
from fishai.promptgen import (
    DescriptionCache,
    MockTextClient,
    PromptRequest,
    describe,
    describe_all,
    render_prompt,
)
from fishai.taxonomy import LabelSpace, TaxonomicLevel


def test_render_prompt_matches_template():
    req = PromptRequest("Hypophthalmichthys molitrix", TaxonomicLevel.SPECIES)
    assert render_prompt(req) == "Briefly describe a single fish belonging to Hypophthalmichthys molitrix."
    assert render_prompt(PromptRequest("Pristiophoridae")) == (
        "Briefly describe a single fish belonging to Pristiophoridae."
    )


def test_render_prompt_empty():
    with pytest.raises(EmptyCategory):
        render_prompt(PromptRequest(""))


class CountingClient:
    def __init__(self, responses=None, client_id="count-v1"):
        self.client_id = client_id
        self.calls = []
        self.responses = responses or {}

    def complete(self, prompt):
        self.calls.append(prompt)
        r = self.responses.get(prompt, f"desc of {prompt}")
        if isinstance(r, Exception):
            raise r
        return r


def test_cache_hit_skips_client(tmp_path):
    cache = DescriptionCache(tmp_path)
    client = CountingClient()
    req = PromptRequest("GenusA", "genus")
    first = describe(client, req, cache)
    second = describe(client, req, cache)
    assert first == second
    assert len(client.calls) == 1


def test_mock_description_contains_category():
    rec = describe(MockTextClient(), PromptRequest("GenusA", "genus"))
    again = describe(MockTextClient(), PromptRequest("GenusA", "genus"))
    assert "GenusA" in rec.description
    assert rec.description == again.description


def test_empty_response():
    client = CountingClient({render_prompt(PromptRequest("X")): "  "})
    with pytest.raises(EmptyResponse):
        describe(client, PromptRequest("X"))


def test_cache_key_stable():
    k1 = promptgen.cache_key("describe-v1", "family", "A", "c")
    assert k1 == promptgen.cache_key("describe-v1", TaxonomicLevel.FAMILY, "A", "c")
    assert k1 != promptgen.cache_key("describe-v1", "genus", "A", "c")
    assert k1 == "d" + k1[1:] or len(k1) == 32


def test_describe_all_order_and_retry_only_failed(tmp_path):
    space = LabelSpace(TaxonomicLevel.FAMILY, ("A", "B", "C"))
    cache = DescriptionCache(tmp_path)
    bad = render_prompt(PromptRequest("B", "family"))
    client = CountingClient({bad: ClientFailure("boom", attempts=3)})
    with pytest.raises(DescribeFailures) as info:
        describe_all(client, space, cache)
    assert [f.category for f in info.value.failures] == ["B"]
    assert [r.category for r in info.value.records] == ["A", "C"]
    assert len(list(tmp_path.glob("*.json"))) == 2

    client2 = CountingClient()
    records = describe_all(client2, space, cache)
    assert [r.category for r in records] == ["A", "B", "C"]
    assert client2.calls == [bad]


def test_describe_all_570_distinct_keys():
    space = LabelSpace(TaxonomicLevel.FAMILY, tuple(f"Family{i:03d}" for i in range(570)))
    records = describe_all(MockTextClient(), space)
    assert len(records) == 570
    assert len({r.cache_key for r in records}) == 570


def test_cache_roundtrip_bytes(tmp_path):
    cache = DescriptionCache(tmp_path)
    rec = describe(MockTextClient(), PromptRequest("Species3", "species"), cache, clock=lambda: "T0")
    path = cache.path(rec.cache_key)
    raw = path.read_bytes()
    loaded = cache.get(rec.cache_key)
    assert loaded == rec
    assert loaded.dumps().encode() == raw


def test_first_write_wins(tmp_path):
    cache = DescriptionCache(tmp_path)
    a = promptgen.DescriptionRecord("A", TaxonomicLevel.FAMILY, "t", "p", "first", "c", "T0", "k")
    b = promptgen.DescriptionRecord("A", TaxonomicLevel.FAMILY, "t", "p", "second", "c", "T1", "k")
    results = []
    threads = [threading.Thread(target=lambda r=r: results.append(cache.put(r))) for r in (a, b) * 4]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    stored = cache.get("k")
    assert all(r == stored for r in results)
    assert stored.description in {"first", "second"}


def test_concurrent_describe_all(tmp_path):
    space = LabelSpace(TaxonomicLevel.GENUS, tuple(f"G{i}" for i in range(20)))
    seq = describe_all(MockTextClient(), space, DescriptionCache(tmp_path / "a"), clock=lambda: "T")
    par = describe_all(MockTextClient(), space, DescriptionCache(tmp_path / "b"), clock=lambda: "T", max_workers=4)
    assert seq == par


def test_load_descriptions(tmp_path):
    cache = DescriptionCache(tmp_path)
    describe_all(MockTextClient(), LabelSpace(TaxonomicLevel.SPECIES, ("S1", "S2")), cache)
    got = promptgen.load_descriptions(cache, "species")
    assert set(got) == {"S1", "S2"}
    assert promptgen.load_descriptions(cache, "family") == {}


def _chat_transport(replies):
    calls = []

    def handler(request):
        calls.append(json.loads(request.content))
        status, body = replies[min(len(calls) - 1, len(replies) - 1)]
        return httpx.Response(status, json=body)

    return httpx.MockTransport(handler), calls


def test_chat_client_retries_then_succeeds(monkeypatch):
    monkeypatch.setenv("FISHAI_LLM_ENDPOINT", "http://llm.local/v1")
    monkeypatch.setenv("FISHAI_LLM_API_KEY", "secret")
    ok = {"choices": [{"message": {"content": "A silvery fish."}}]}
    transport, calls = _chat_transport([(500, {}), (200, ok)])
    sleeps = []
    cfg = promptgen.TextClientConfig(client_id="deepseek", model_name="deepseek-chat", backoff_s=0.5)
    client = promptgen.ChatCompletionClient(cfg, transport=transport, sleep=sleeps.append)
    assert client.complete("hello") == "A silvery fish."
    assert sleeps == [0.5]
    assert calls[0]["model"] == "deepseek-chat"
    assert calls[0]["messages"] == [{"role": "user", "content": "hello"}]


def test_chat_client_gives_up_after_three(monkeypatch):
    monkeypatch.setenv("FISHAI_LLM_ENDPOINT", "http://llm.local/v1")
    transport, calls = _chat_transport([(503, {})])
    sleeps = []
    client = promptgen.ChatCompletionClient(promptgen.TextClientConfig(client_id="x", model_name="m"),
                                            transport=transport, sleep=sleeps.append)
    with pytest.raises(ClientFailure) as info:
        describe(client, PromptRequest("A"))
    assert info.value.attempts == 3 and info.value.category == "A"
    assert len(calls) == 3 and sleeps == [1.0, 2.0]


def test_chat_client_needs_endpoint(monkeypatch):
    monkeypatch.delenv("FISHAI_LLM_ENDPOINT", raising=False)
    with pytest.raises(ClientFailure):
        promptgen.ChatCompletionClient(promptgen.TextClientConfig(client_id="x", model_name="m"))
