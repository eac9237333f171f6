"""Discrimination prompts for candidate categories, the attribute catalog, the
response cache, and assembly of per-cluster augmented text banks.

The language-model client is a single text-in/text-out interface with three
bindings: a live HTTP client configured through environment variables, a
replay cache, and a deterministic fixture, so the pipeline runs fully offline.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import FormatError, ValidationError
from .store import EmbeddingMatrix, Vocabulary, l2_normalize

PROMPT_PREFIX = "Given visual concepts: "
PROMPT_INSTRUCTION = (
    "Goal: to discriminate these visual concepts in a photo. "
    "Please list all possible visual descriptive phrases for each visual concept."
)
DEFAULT_TEMPLATE = "A photo of a {category} with {attribute}."
FALLBACK_ATTRIBUTES = ["distinctive appearance"]

ENV_URL = "VOCALIGN_LLM_URL"
ENV_KEY = "VOCALIGN_LLM_KEY"
ENV_MODEL = "VOCALIGN_LLM_MODEL"
ENV_TIMEOUT = "VOCALIGN_LLM_TIMEOUT"


@dataclass
class AttributeCatalog:
    """word_id -> non-empty list of attribute phrases."""

    attributes: dict[int, list[str]]
    source: str = "fixture"  # llm-name | fixture | cache
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        for j, attrs in self.attributes.items():
            cleaned = [a.strip() for a in attrs if a and a.strip()]
            if not cleaned:
                raise ValidationError(f"word {j} has an empty attribute list")
            self.attributes[j] = cleaned

    def save(self, path, vocab: Vocabulary | None = None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for j in sorted(self.attributes):
                rec = {
                    "word_id": j,
                    "name": vocab.name(j) if vocab else "",
                    "attributes": self.attributes[j],
                }
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, path) -> "AttributeCatalog":
        attrs = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            rec = json.loads(line)
            attrs[int(rec["word_id"])] = list(rec["attributes"])
        return cls(attrs, source="cache")


@dataclass
class PromptSentence:
    word_id: int
    attribute: str
    template_index: int
    text: str


@dataclass
class AugmentedTextBank:
    """Per-cluster augmented prompt embeddings; one entry per (word, attribute)."""

    cluster_id: int
    word_ids: np.ndarray
    texts: list[str]
    embeddings: EmbeddingMatrix


def build_prompt(candidates: list[tuple[str, list[str]]]) -> str:
    """Discrimination prompt for one cluster's candidates. Every synset of a
    candidate contributes its own name: definition pair."""
    if not candidates:
        raise ValidationError("candidate list is empty")
    pairs = []
    for name, definitions in candidates:
        if not definitions:
            raise ValidationError(f"candidate {name!r} has no definition")
        pairs.extend(f"{name}: {d}" for d in definitions)
    return PROMPT_PREFIX + ", ".join(pairs) + ".\n" + PROMPT_INSTRUCTION


class ResponseCache:
    """Append-only JSONL store of {key, model, request, response, ts} records."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._records: dict[str, str] = {}
        if self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                rec = json.loads(line)
                self._records[rec["key"]] = rec["response"]

    def get(self, key: str) -> str | None:
        return self._records.get(key)

    def put(self, key: str, model: str, request: str, response: str) -> None:
        with self._lock:
            self._records[key] = response
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(
                    json.dumps(
                        {
                            "key": key,
                            "model": model,
                            "request": request,
                            "response": response,
                            "ts": time.time(),
                        },
                        ensure_ascii=False,
                    )
                    + "\n"
                )

    def __len__(self) -> int:
        return len(self._records)


class LlmTransportError(ValidationError):
    pass


class HttpLlmClient:
    """Minimal chat-completions client; endpoint, key, and model come from the
    environment so runs never embed credentials in config files."""

    def __init__(self, url=None, api_key=None, model=None, timeout=None):
        self.url = url or os.environ.get(ENV_URL)
        self.api_key = api_key or os.environ.get(ENV_KEY, "")
        self.model_id = model or os.environ.get(ENV_MODEL, "default")
        self.timeout = float(timeout or os.environ.get(ENV_TIMEOUT, "60"))
        if not self.url:
            raise ValidationError(f"no LLM endpoint configured (set {ENV_URL})")

    def complete(self, prompt: str) -> str:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {"model": self.model_id, "messages": [{"role": "user", "content": prompt}]}
        try:
            resp = requests.post(self.url, json=payload, headers=headers, timeout=self.timeout)
            resp.raise_for_status()
        except requests.RequestException as e:
            raise LlmTransportError(str(e)) from e
        body = resp.json()
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as e:
            raise LlmTransportError(f"unexpected response shape: {e}") from e


class FixtureLlmClient:
    """Deterministic offline stand-in: emits a parseable attribute roster for
    each concept named in the prompt."""

    model_id = "fixture"

    _concept = re.compile(r"(?:^Given visual concepts: |, )([^:,]+): ")

    def complete(self, prompt: str) -> str:
        names = []
        for m in self._concept.finditer(prompt):
            name = m.group(1).strip()
            if name and name not in names:
                names.append(name)
        blocks = []
        for name in names:
            blocks.append(
                f"{name}:\n"
                f"- distinctive {name} silhouette\n"
                f"- characteristic {name} texture\n"
                f"- typical {name} coloring"
            )
        return "\n".join(blocks)


def request_key(model_id: str, prompt: str) -> str:
    return hashlib.sha256((model_id + "\x00" + prompt).encode("utf-8")).hexdigest()


def query_attributes(prompt: str, client=None, cache: ResponseCache | None = None) -> str:
    """Cache-first text completion with a single retry on transport failure."""
    model_id = getattr(client, "model_id", "none")
    key = request_key(model_id, prompt)
    if cache is not None:
        hit = cache.get(key)
        if hit is not None:
            return hit
    if client is None:
        raise ValidationError(
            "no LLM client configured and the prompt is not cached; "
            "use the fixture client or prime the response cache for offline runs"
        )
    try:
        response = client.complete(prompt)
    except LlmTransportError:
        try:
            response = client.complete(prompt)
        except LlmTransportError as e:
            raise LlmTransportError(f"request {key[:12]} failed twice: {e}") from e
    if cache is not None:
        cache.put(key, model_id, prompt, response)
    return response


_HEADER_PREFIX = re.compile(r"^\s*(?:\d+[.)]\s*)?")
_PHRASE_PREFIX = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s+")


def parse_attributes(response: str, candidates: list[tuple[int, str]]) -> AttributeCatalog:
    """Extract per-category phrase lists: a header line naming the category
    (optionally numbered, optional trailing colon) opens a block; dash, star,
    bullet, or numbered lines below it are its attributes. Categories missing
    from the response get the fallback list plus a warning."""
    if not response.strip():
        raise FormatError("empty LLM response")
    by_name = {name.strip().casefold(): j for j, name in candidates}
    found: dict[int, list[str]] = {}
    warnings: list[str] = []
    current: int | None = None
    matched_headers = 0
    for raw in response.splitlines():
        line = raw.strip()
        if not line:
            continue
        header = _HEADER_PREFIX.sub("", line).rstrip(":").strip().casefold()
        if header in by_name:
            current = by_name[header]
            found.setdefault(current, [])
            matched_headers += 1
            continue
        m = _PHRASE_PREFIX.match(line)
        if m and current is not None:
            phrase = line[m.end() :].strip()
            if phrase:
                found[current].append(phrase)
    if matched_headers == 0:
        raise FormatError(f"no category headers matched; response began: {response[:200]!r}")
    for j, name in candidates:
        if not found.get(j):
            found[j] = list(FALLBACK_ATTRIBUTES)
            warnings.append(f"no attributes parsed for {name!r} (word {j}); using fallback")
    return AttributeCatalog(found, source="llm-name", warnings=warnings)


def compose_prompt_sentences(
    catalog: AttributeCatalog,
    candidate_word_ids: list[int],
    vocab: Vocabulary,
    templates: list[str] | None = None,
) -> list[PromptSentence]:
    """Cartesian product of candidate attributes with the template ensemble,
    ordered by (word_id, attribute index, template index)."""
    templates = templates or [DEFAULT_TEMPLATE]
    out = []
    for j in sorted(candidate_word_ids):
        if j not in catalog.attributes:
            raise ValidationError(f"word {j} ({vocab.name(j)!r}) missing from attribute catalog")
        for attr in catalog.attributes[j]:
            for t_idx, template in enumerate(templates):
                out.append(
                    PromptSentence(
                        word_id=j,
                        attribute=attr,
                        template_index=t_idx,
                        text=template.format(category=vocab.name(j), attribute=attr),
                    )
                )
    return out


def assemble_bank(
    cluster_id: int, sentences: list[PromptSentence], embeddings: EmbeddingMatrix
) -> AugmentedTextBank:
    """Average the template-ensemble embeddings of each (word, attribute) pair
    and renormalize, yielding one bank entry per pair."""
    if embeddings.n != len(sentences):
        raise ValidationError(
            f"{len(sentences)} sentences but {embeddings.n} embedding rows"
        )
    groups: dict[tuple[int, str], list[int]] = {}
    order: list[tuple[int, str]] = []
    for i, ps in enumerate(sentences):
        key = (ps.word_id, ps.attribute)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(i)
    rows = np.empty((len(order), embeddings.d))
    word_ids = np.empty(len(order), dtype=np.int64)
    texts = []
    for out_i, key in enumerate(order):
        mean = embeddings.data[groups[key]].mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm < 1e-12:
            raise ValidationError(
                f"ensemble mean vanished for word {key[0]} attribute {key[1]!r}"
            )
        rows[out_i] = mean / norm
        word_ids[out_i] = key[0]
        texts.append(sentences[groups[key][0]].text)
    return AugmentedTextBank(
        cluster_id=cluster_id,
        word_ids=word_ids,
        texts=texts,
        embeddings=EmbeddingMatrix(rows, normalized=True),
    )


class PrototypeSentenceEmbedder:
    """Synthetic stand-in for a text encoder: each sentence embeds near its
    word's prototype with deterministic, sentence-hashed jitter. Used for
    tests and synthetic worlds; real runs use exporter-produced files."""

    def __init__(self, vocab_bank: EmbeddingMatrix, sigma: float = 0.05):
        self.bank = vocab_bank
        self.sigma = sigma

    def __call__(self, sentences: list[PromptSentence]) -> EmbeddingMatrix:
        rows = np.empty((len(sentences), self.bank.d))
        for i, ps in enumerate(sentences):
            seed = int.from_bytes(
                hashlib.sha256(ps.text.encode("utf-8")).digest()[:8], "little"
            )
            noise = np.random.default_rng(np.random.PCG64(seed)).standard_normal(self.bank.d)
            rows[i] = self.bank.data[ps.word_id] + self.sigma * noise
        return l2_normalize(EmbeddingMatrix(rows))


class FileSentenceEmbedder:
    """Looks up precomputed sentence embeddings (an EMB1 file row-aligned with
    a sentence list, as written by the exporter)."""

    def __init__(self, embeddings: EmbeddingMatrix, sentence_list: list[str]):
        if embeddings.n != len(sentence_list):
            raise ValidationError(
                f"embedding rows ({embeddings.n}) != sentences ({len(sentence_list)})"
            )
        if not embeddings.normalized:
            embeddings = l2_normalize(embeddings)
        self._rows = {s: i for i, s in enumerate(sentence_list)}
        self._emb = embeddings

    @classmethod
    def from_files(cls, emb_path, sentences_path) -> "FileSentenceEmbedder":
        from .store import load_matrix

        sentences = Path(sentences_path).read_text(encoding="utf-8").splitlines()
        return cls(load_matrix(emb_path), sentences)

    def __call__(self, sentences: list[PromptSentence]) -> EmbeddingMatrix:
        idx = []
        for ps in sentences:
            if ps.text not in self._rows:
                raise ValidationError(f"no precomputed embedding for sentence {ps.text!r}")
            idx.append(self._rows[ps.text])
        return EmbeddingMatrix(self._emb.data[idx], normalized=True)
