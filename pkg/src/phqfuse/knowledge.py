"""Psychology Q&A corpus construction and prompt templates.

Source paragraphs are filtered by disorder-title keywords, rendered into
a fixed generation prompt, sent to a pluggable text generator, and the
question/answer response format is parsed back into forty pairs per
source (ten each for definitions, why-questions, and phenomena, five
each for extended knowledge and critical thinking, assigned by
position). The teacher and rating prompts used by the judge harness live
here too, next to their response parsers.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import codec
from .errors import (
    ConfigError,
    ContractError,
    PairingError,
    ParseError,
    RangeError,
    RemoteError,
    ValidationError,
)

logger = logging.getLogger(__name__)

DEFAULT_KEYWORDS = ("anxiety", "depress*", "mood", "stress", "chronic", "isolation")

CATEGORY_SPANS = (10, 10, 10, 5, 5)
CATEGORY_NAMES = {1: "definition", 2: "why", 3: "phenomena", 4: "extended", 5: "critical"}
PAIRS_PER_SOURCE = sum(CATEGORY_SPANS)

GENERATION_PROMPT_TEMPLATE = (
    "Construct Q&A sets based on one [paragraph] I give you.\n"
    "\n"
    "(1) The 10 Q&A sets should be about the key definitions mentioned in the "
    "paragraph. The Q&A set should contain no extra knowledge. (2) The 10 "
    "questions in these sets should be 'why' questions. The Q&A set should "
    "contain no extra knowledge. (3) The 10 Q&A are about the phenomena that "
    "may occur on people with such disorder. The Q&A set should contain no "
    "extra knowledge. (4) The 5 Q&A sets should be completely based on "
    "extended knowledge which is not mentioned in the [paragraph], but should "
    "also be considered important about such disorder. (5) The five Q&A sets "
    "should show critical thinking. The Q&A set should contain no extra "
    "knowledge.\n"
    "\n"
    "The entire conversation should contain English only. The message you "
    "reply must follow the exact format in the [example], do not add any "
    'extra " or other marks at the beginning or the end of your question or '
    "answer.\n"
    "\n"
    "[example]:\n"
    "\n"
    "question: This is the first question you construct.\n"
    "\n"
    "answer: This is the first answer you construct.\n"
)

@dataclass(frozen=True)
class KnowledgeEntry:
    source_id: str
    title: str
    paragraph: str

    def __post_init__(self):
        if not self.paragraph.strip():
            raise ValidationError(f"entry {self.source_id}: empty paragraph")


@dataclass(frozen=True)
class QAPair:
    question: str
    answer: str
    source_id: str
    category: int

    def __post_init__(self):
        if not self.question.strip() or not self.answer.strip():
            raise ValidationError(f"source {self.source_id}: empty question or answer")
        if self.category not in CATEGORY_NAMES:
            raise RangeError(f"category {self.category} outside 1..5")


_WORD = re.compile(r"[a-z0-9]+")


def _title_matches(title: str, keyword: str) -> bool:
    low = title.lower()
    if keyword.endswith("*"):
        stem = keyword[:-1].lower()
        return any(word.startswith(stem) for word in _WORD.findall(low))
    return keyword.lower() in low


def filter_entries(entries, keywords=DEFAULT_KEYWORDS) -> list[KnowledgeEntry]:
    """Keep entries whose title matches any keyword, case-insensitive.

    A trailing ``*`` makes the keyword a word-prefix wildcard, so
    depress* catches depression/depressive but also over-matches words
    like depressurization; plain keywords are substring matches.
    """
    return [e for e in entries if any(_title_matches(e.title, k) for k in keywords)]


def render_generation_prompt(entry: KnowledgeEntry) -> str:
    """Substitute the paragraph into the first [paragraph] slot only.

    The later mention in item (4) refers to the paragraph and stays
    literal, so two sources' prompts differ only in the substituted span.
    """
    if not entry.paragraph.strip():
        raise ContractError(f"entry {entry.source_id}: empty paragraph")
    return GENERATION_PROMPT_TEMPLATE.replace("[paragraph]", entry.paragraph, 1)


def positional_category(index: int) -> int:
    """Category for the 0-based pair index: spans of 10,10,10,5,5."""
    upper = 0
    for cat, span in enumerate(CATEGORY_SPANS, start=1):
        upper += span
        if index < upper:
            return cat
    raise RangeError(f"pair index {index} beyond {PAIRS_PER_SOURCE} per source")


def parse_qa_response(
    text: str, source_id: str, expected_pairs: int | None = PAIRS_PER_SOURCE
) -> list[QAPair]:
    """Scan alternating question:/answer: lines into categorized pairs.

    Lines that carry neither marker are ignored; a question must be
    answered before the next question starts and before end of input.
    """
    raw: list[tuple[str, str]] = []
    open_question: str | None = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        low = stripped.lower()
        if low.startswith("question:"):
            if open_question is not None:
                raise PairingError(
                    f"source {source_id}: line {lineno}: question "
                    f"{len(raw) + 1} has no answer", count=len(raw),
                )
            open_question = stripped[len("question:"):].strip()
        elif low.startswith("answer:"):
            if open_question is None:
                raise PairingError(
                    f"source {source_id}: line {lineno}: answer without a "
                    f"question after pair {len(raw)}", count=len(raw),
                )
            answer = stripped[len("answer:"):].strip()
            if not open_question or not answer:
                raise PairingError(
                    f"source {source_id}: line {lineno}: empty question or answer "
                    f"at pair {len(raw) + 1}", count=len(raw),
                )
            raw.append((open_question, answer))
            open_question = None
    if open_question is not None:
        raise PairingError(
            f"source {source_id}: trailing question {len(raw) + 1} has no answer",
            count=len(raw),
        )
    if expected_pairs is not None and len(raw) != expected_pairs:
        raise ValidationError(
            f"source {source_id}: expected {expected_pairs} pairs, parsed {len(raw)}",
            count=len(raw),
        )
    return [
        QAPair(q, a, source_id, positional_category(i)) for i, (q, a) in enumerate(raw)
    ]


def render_qa_response(pairs) -> str:
    """Emit pairs in the example format (inverse of parse_qa_response)."""
    blocks = [f"question: {p.question}\n\nanswer: {p.answer}" for p in pairs]
    return "\n\n".join(blocks) + "\n"


def category_histogram(pairs) -> list[int]:
    counts = [0] * len(CATEGORY_SPANS)
    for p in pairs:
        counts[p.category - 1] += 1
    return counts


@dataclass
class InjectionExample:
    input_ids: np.ndarray  # int64, the shifted-by-one LM input
    target_ids: np.ndarray  # int64, next-token targets
    loss_mask: np.ndarray  # bool, True on answer tokens and the EOS


def build_injection_examples(
    pairs, max_seq_len: int = 512
) -> tuple[list[InjectionExample], int]:
    """Token-level training examples: prompt is context, answer is loss.

    Returns (examples, skipped) where skipped counts pairs whose token
    sequence would exceed max_seq_len.
    """
    examples: list[InjectionExample] = []
    skipped = 0
    for p in pairs:
        prompt_ids = [codec.BOS_ID] + codec.encode(f"question: {p.question}\nanswer: ")
        answer_ids = codec.encode(p.answer) + [codec.EOS_ID]
        full = prompt_ids + answer_ids
        if len(full) - 1 > max_seq_len:
            skipped += 1
            logger.warning(
                "skipping pair from %s: %d tokens exceed max_seq_len %d",
                p.source_id, len(full) - 1, max_seq_len,
            )
            continue
        input_ids = np.asarray(full[:-1], dtype=np.int64)
        target_ids = np.asarray(full[1:], dtype=np.int64)
        mask = np.zeros(len(target_ids), dtype=bool)
        mask[len(prompt_ids) - 1 :] = True
        examples.append(InjectionExample(input_ids, target_ids, mask))
    return examples, skipped


@dataclass
class CorpusResult:
    pairs: list[QAPair]
    dropped_sources: list[str]

    @property
    def accepted_sources(self) -> int:
        return len({p.source_id for p in self.pairs})


def generate_corpus(entries, generator, max_retries: int = 3) -> CorpusResult:
    """Run generation per entry; malformed output retries then drops.

    Entries are processed (and results committed) in input order, so the
    corpus is deterministic for a deterministic generator.
    """
    pairs: list[QAPair] = []
    dropped: list[str] = []
    for entry in entries:
        prompt = render_generation_prompt(entry)
        got: list[QAPair] | None = None
        for attempt in range(1 + max_retries):
            response = generator.generate(prompt)
            try:
                got = parse_qa_response(response, entry.source_id)
                break
            except (PairingError, ValidationError) as e:
                logger.warning(
                    "source %s attempt %d rejected: %s", entry.source_id, attempt + 1, e
                )
        if got is None:
            dropped.append(entry.source_id)
        else:
            pairs.extend(got)
    if dropped:
        logger.warning("dropped %d source(s) after retries: %s", len(dropped), dropped)
    return CorpusResult(pairs, dropped)


# ---------------------------------------------------------------------------
# corpus and entry persistence (one JSON object per line)


def load_entries(path) -> list[KnowledgeEntry]:
    entries = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            entries.append(
                KnowledgeEntry(str(obj["source_id"]), str(obj["title"]), str(obj["paragraph"]))
            )
        except (json.JSONDecodeError, KeyError, ValidationError) as e:
            raise ParseError(f"{path}: line {lineno}: {e}") from e
    return entries


def save_entries(entries, path) -> int:
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(json.dumps(
                {"source_id": e.source_id, "title": e.title, "paragraph": e.paragraph},
                sort_keys=True,
            ) + "\n")
    return len(entries)


def save_pairs(pairs, path) -> int:
    with open(path, "w", encoding="utf-8") as f:
        for p in pairs:
            f.write(json.dumps(
                {"question": p.question, "answer": p.answer,
                 "source_id": p.source_id, "category": p.category},
                sort_keys=True,
            ) + "\n")
    return len(pairs)


def load_pairs(path) -> list[QAPair]:
    pairs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            pairs.append(QAPair(obj["question"], obj["answer"],
                                str(obj["source_id"]), int(obj["category"])))
        except (json.JSONDecodeError, KeyError, ValueError) as e:
            raise ParseError(f"{path}: line {lineno}: {e}") from e
    return pairs


# ---------------------------------------------------------------------------
# text generators


class TextGenerator:
    """Interface: generate(prompt) -> text.

    seed, when given, makes that one call reproducible; generators that
    are already pure in the prompt may fold it into their output so
    repeated sampling can differ.
    """

    def generate(self, prompt: str, max_tokens: int = 2048, temperature: float = 0.8,
                 seed: int | None = None) -> str:
        raise NotImplementedError


def _stable_int(*parts: str) -> int:
    digest = hashlib.sha256("\x1f".join(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class FixtureGenerator(TextGenerator):
    """Deterministic, pure stub covering all three prompt families.

    Generation prompts get forty well-formed pairs whose wording is a
    stable hash of the prompt; teacher prompts get the requested count of
    numbered questions; rating prompts get a single digit. Anything else
    gets a fixed acknowledgement line.
    """

    _TOPICS = ("screening", "sleep changes", "interview cues", "risk factors",
               "follow-up care", "symptom duration", "daily functioning")

    def generate(self, prompt: str, max_tokens: int = 2048, temperature: float = 0.8,
                 seed: int | None = None) -> str:
        if prompt.startswith("Construct Q&A sets"):
            return self._qa_response(prompt)
        if prompt.startswith("Regard yourself as a teacher"):
            return self._questions_response(prompt)
        if prompt.startswith("Rate the following response"):
            return str(_stable_int(prompt) % 11)
        if seed is not None:
            # distinct samples for the same prompt, still reproducible
            return f"understood (sample {_stable_int(prompt, str(seed)) % 1000})."
        return "understood."

    def _qa_response(self, prompt: str) -> str:
        key = _stable_int(prompt)
        blocks = []
        for i in range(PAIRS_PER_SOURCE):
            topic = self._TOPICS[(key + i) % len(self._TOPICS)]
            blocks.append(
                f"question: What should a learner know about {topic} (point {i + 1})?\n\n"
                f"answer: Point {i + 1} relates {topic} to the source material "
                f"(ref {key % 9973})."
            )
        return "\n\n".join(blocks) + "\n"

    def _questions_response(self, prompt: str) -> str:
        m = re.search(r"Generate (\d+) specific questions", prompt)
        n = int(m.group(1)) if m else 50
        lines = [
            f"{i + 1}. How does {self._TOPICS[i % len(self._TOPICS)]} inform a "
            f"depression assessment (variant {i + 1})?"
            for i in range(n)
        ]
        return "\n".join(lines) + "\n"


class LocalGenerator(TextGenerator):
    """Route prompts through the in-package language model."""

    def __init__(self, model, adapters=None, rng=None, max_new_tokens: int = 64):
        self.model = model
        self.adapters = adapters
        self.rng = rng
        self.max_new_tokens = max_new_tokens

    def generate(self, prompt: str, max_tokens: int | None = None, temperature: float = 0.8,
                 seed: int | None = None) -> str:
        budget = min(max_tokens or self.max_new_tokens, self.max_new_tokens)
        ids = codec.encode(prompt, add_bos=True)
        room = self.model.cfg.max_seq_len - budget - 1
        if room < 1:
            raise ContractError("generation budget leaves no room for a prompt")
        if len(ids) > room:
            ids = [codec.BOS_ID] + ids[len(ids) - room + 1 :]
        rng = np.random.default_rng(seed) if seed is not None else self.rng
        out = self.model.generate(
            ids, max_new_tokens=budget, temperature=temperature,
            rng=rng, adapters=self.adapters,
        )
        return codec.decode(out, errors="replace")


class RemoteGenerator(TextGenerator):
    """HTTP client for an external completion endpoint.

    POSTs JSON {prompt, max_tokens, temperature} with a bearer token from
    the PHQFUSE_API_KEY environment variable and reads the JSON field
    "text" back. Retries with exponential backoff, then raises, so a dead
    endpoint never stalls the pipeline beyond its timeout budget.
    """

    def __init__(
        self,
        endpoint: str,
        api_key: str | None = None,
        timeout: float = 30.0,
        max_attempts: int = 3,
        backoff: float = 0.5,
    ):
        self.endpoint = endpoint
        self.api_key = api_key if api_key is not None else os.environ.get("PHQFUSE_API_KEY")
        if not self.api_key:
            raise ConfigError("no API key: set PHQFUSE_API_KEY or pass api_key")
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff = backoff

    def generate(self, prompt: str, max_tokens: int = 2048, temperature: float = 0.8,
                 seed: int | None = None) -> str:
        import requests

        body = {"prompt": prompt, "max_tokens": max_tokens, "temperature": temperature}
        if seed is not None:
            body["seed"] = seed
        headers = {"Authorization": f"Bearer {self.api_key}"}
        last_error: Exception | None = None
        for attempt in range(self.max_attempts):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = requests.post(
                    self.endpoint, json=body, headers=headers, timeout=self.timeout
                )
                resp.raise_for_status()
                payload = resp.json()
                if "text" not in payload:
                    raise RemoteError(f"response JSON lacks 'text': {payload!r}")
                return str(payload["text"])
            except RemoteError:
                raise
            except Exception as e:  # request, HTTP, or JSON failure: retry
                last_error = e
                logger.warning("generation attempt %d/%d failed: %s",
                               attempt + 1, self.max_attempts, e)
        raise RemoteError(
            f"endpoint {self.endpoint} failed after {self.max_attempts} attempts: {last_error}"
        )
