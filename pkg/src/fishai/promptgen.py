"""Category description generation with a pluggable text client and a file cache.

Cache layout: ``<cache_dir>/<cache_key>.json``, one pretty-printed JSON object
per category with keys in :data:`DESCRIPTION_FIELDS` order. The first
successful write of a key is final.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Protocol

from .errors import ClientFailure, DescribeFailures, EmptyCategory, EmptyResponse
from .io import sha256_hex, stable_hash, write_once
from .taxonomy import LabelSpace, TaxonomicLevel, normalize_name

log = logging.getLogger(__name__)

TEMPLATES = {
    "describe-v1": "Briefly describe a single fish belonging to {Categories}.",
}
DEFAULT_TEMPLATE = "describe-v1"
DESCRIPTION_FIELDS = (
    "category",
    "level",
    "template_id",
    "prompt_text",
    "description",
    "client_id",
    "created_at",
    "cache_key",
)


@dataclass(frozen=True)
class PromptRequest:
    category: str
    level: TaxonomicLevel = TaxonomicLevel.FAMILY
    template_id: str = DEFAULT_TEMPLATE

    def __post_init__(self):
        object.__setattr__(self, "level", TaxonomicLevel.parse(self.level))
        if not self.category or not self.category.strip():
            raise EmptyCategory("prompt category is empty")


@dataclass(frozen=True)
class DescriptionRecord:
    category: str
    level: TaxonomicLevel
    template_id: str
    prompt_text: str
    description: str
    client_id: str
    created_at: str
    cache_key: str

    def to_json(self) -> dict:
        d = {name: getattr(self, name) for name in DESCRIPTION_FIELDS}
        d["level"] = self.level.label
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_json(), ensure_ascii=False, indent=2) + "\n"

    @classmethod
    def from_json(cls, obj) -> "DescriptionRecord":
        return cls(**{**obj, "level": TaxonomicLevel.parse(obj["level"])})


class TextClient(Protocol):
    client_id: str

    def complete(self, prompt_text: str) -> str: ...


def render_prompt(request: PromptRequest) -> str:
    category = normalize_name(request.category)
    if not category:
        raise EmptyCategory("prompt category is empty")
    return TEMPLATES[request.template_id].format(Categories=category)


def cache_key(template_id: str, level, category: str, client_id: str) -> str:
    level = TaxonomicLevel.parse(level)
    return sha256_hex(json.dumps([template_id, level.label, category, client_id]))[:32]


_BODY = ("slender", "deep-bodied", "compressed", "elongated", "stout", "fusiform", "flattened")
_COLOUR = ("silvery", "olive-brown", "mottled grey", "banded yellow", "iridescent blue", "speckled red")
_HABITAT = ("coastal reefs", "open pelagic water", "sandy shelves", "estuaries", "rocky kelp beds", "deep slopes")
_FEATURE = (
    "a forked caudal fin",
    "a prominent dorsal spine",
    "large eyes",
    "an upturned mouth",
    "a lateral stripe",
    "small cycloid scales",
)


class MockTextClient:
    """Deterministic offline describer.

    The response is a template fill seeded by ``(client_id, prompt_text)`` and
    always repeats the category name verbatim.
    """

    def __init__(self, client_id: str = "mock-text-v1"):
        self.client_id = client_id
        self.calls = 0

    def complete(self, prompt_text: str) -> str:
        self.calls += 1
        category = _category_from_prompt(prompt_text)
        h = stable_hash(self.client_id, prompt_text)
        pick = lambda opts, shift: opts[(h >> shift) % len(opts)]  # noqa: E731
        return (
            f"A member of {category}, this {pick(_BODY, 0)} fish has a {pick(_COLOUR, 8)} body "
            f"and {pick(_FEATURE, 16)}. It is typically found in {pick(_HABITAT, 24)}, "
            f"where {category} individuals feed on small invertebrates."
        )


def _category_from_prompt(prompt_text: str) -> str:
    for template in TEMPLATES.values():
        head, _, tail = template.partition("{Categories}")
        if prompt_text.startswith(head) and prompt_text.endswith(tail):
            return prompt_text[len(head) : len(prompt_text) - len(tail)]
    return prompt_text


@dataclass(frozen=True)
class TextClientConfig:
    client_id: str = "mock-text-v1"
    model_name: str = "mock"
    timeout_s: float = 60.0
    endpoint_env: str = "FISHAI_LLM_ENDPOINT"
    api_key_env: str = "FISHAI_LLM_API_KEY"
    max_attempts: int = 3
    backoff_s: float = 1.0


class ChatCompletionClient:
    """Client for an OpenAI-compatible ``/chat/completions`` endpoint.

    Endpoint URL and API key come from the environment variables named in the
    config. Each request is retried ``max_attempts`` times with exponential
    backoff before :class:`ClientFailure` is raised.
    """

    def __init__(self, config: TextClientConfig, transport=None, sleep: Callable[[float], None] = time.sleep):
        import httpx

        endpoint = os.environ.get(config.endpoint_env)
        if not endpoint:
            raise ClientFailure(f"environment variable {config.endpoint_env} is not set")
        headers = {}
        key = os.environ.get(config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self.config = config
        self.client_id = config.client_id
        self._sleep = sleep
        self._http = httpx.Client(
            base_url=endpoint.rstrip("/"), headers=headers, timeout=config.timeout_s, transport=transport
        )

    def complete(self, prompt_text: str) -> str:
        import httpx

        last = None
        for attempt in range(1, self.config.max_attempts + 1):
            try:
                resp = self._http.post(
                    "/chat/completions",
                    json={
                        "model": self.config.model_name,
                        "messages": [{"role": "user", "content": prompt_text}],
                    },
                )
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"] or ""
            except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
                last = exc
                log.warning("text client attempt %d/%d failed: %s", attempt, self.config.max_attempts, exc)
                if attempt < self.config.max_attempts:
                    self._sleep(self.config.backoff_s * 2 ** (attempt - 1))
        raise ClientFailure(f"text client failed after {self.config.max_attempts} attempts: {last}",
                            attempts=self.config.max_attempts)


def make_text_client(config: TextClientConfig | None = None):
    config = config or TextClientConfig()
    if config.model_name == "mock" or config.client_id.startswith("mock"):
        return MockTextClient(config.client_id)
    return ChatCompletionClient(config)


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class DescriptionCache:
    def __init__(self, root):
        self.root = Path(root)

    def path(self, key: str) -> Path:
        return self.root / f"{key}.json"

    def get(self, key: str) -> DescriptionRecord | None:
        p = self.path(key)
        if not p.exists():
            return None
        return DescriptionRecord.from_json(json.loads(p.read_text(encoding="utf-8")))

    def put(self, record: DescriptionRecord) -> DescriptionRecord:
        """Persist ``record`` unless the key exists; returns the stored record."""
        if write_once(self.path(record.cache_key), record.dumps().encode("utf-8")):
            return record
        return self.get(record.cache_key)

    def records(self) -> list[DescriptionRecord]:
        return [DescriptionRecord.from_json(json.loads(p.read_text(encoding="utf-8")))
                for p in sorted(self.root.glob("*.json"))]


def describe(
    client: TextClient,
    request: PromptRequest,
    cache: DescriptionCache | None = None,
    clock: Callable[[], str] = utc_now,
) -> DescriptionRecord:
    category = normalize_name(request.category)
    key = cache_key(request.template_id, request.level, category, client.client_id)
    if cache is not None:
        hit = cache.get(key)
        if hit is not None:
            return hit
    prompt = render_prompt(request)
    try:
        text = client.complete(prompt)
    except ClientFailure as exc:
        exc.category = category
        raise
    except Exception as exc:
        raise ClientFailure(f"{category}: {exc}", attempts=1, category=category) from exc
    if not text or not text.strip():
        raise EmptyResponse(f"client {client.client_id} returned an empty description for {category}")
    record = DescriptionRecord(
        category=category,
        level=request.level,
        template_id=request.template_id,
        prompt_text=prompt,
        description=text.strip(),
        client_id=client.client_id,
        created_at=clock(),
        cache_key=key,
    )
    if cache is not None:
        record = cache.put(record)
    return record


def describe_all(
    client: TextClient,
    label_space: LabelSpace,
    cache: DescriptionCache | None = None,
    template_id: str = DEFAULT_TEMPLATE,
    clock: Callable[[], str] = utc_now,
    max_workers: int = 1,
) -> list[DescriptionRecord]:
    """Describe every category of ``label_space`` in label order.

    Successful records are cached even when other categories fail; failures
    are collected and raised together as :class:`DescribeFailures`.
    """

    def one(category):
        try:
            return describe(client, PromptRequest(category, label_space.level, template_id), cache, clock)
        except (ClientFailure, EmptyResponse) as exc:
            if not isinstance(exc, ClientFailure):
                exc = ClientFailure(str(exc), attempts=1, category=category)
            exc.category = category
            return exc

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            results = list(pool.map(one, label_space.categories))
    else:
        results = [one(c) for c in label_space.categories]
    failures = [r for r in results if isinstance(r, ClientFailure)]
    records = [r for r in results if isinstance(r, DescriptionRecord)]
    if failures:
        raise DescribeFailures(failures, records)
    return records


def description_map(records) -> dict[str, str]:
    return {r.category: r.description for r in records}


def load_descriptions(cache: DescriptionCache, level, client_id: str | None = None) -> dict[str, str]:
    """All cached descriptions at ``level`` as ``{category: text}``."""
    level = TaxonomicLevel.parse(level)
    out = {}
    for r in cache.records():
        if r.level is level and (client_id is None or r.client_id == client_id):
            out.setdefault(r.category, r.description)
    return out
