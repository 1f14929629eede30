"""
TriDomain Retrieval Summarization Engine
ASR text summarization: prompt construction, remote LLM client, mock and
keyword summarizers, output parsing and signal-level accounting
"""

import logging
import re
import threading
import time
import uuid
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import httpx
from pydantic import BaseModel
from sklearn.feature_extraction.text import ENGLISH_STOP_WORDS
from tenacity import RetryError, Retrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from app.config import settings
from app.exceptions import LLMTransportError
from app.schemas import (
    ASR_MISSING_TEXT,
    NO_OUTPUT_TEXT,
    DomainId,
    LlmExchange,
    ProductInstance,
    SummarizerAccuracy,
    SummarizerKind,
    SummaryRecord,
    SummaryStatus,
    SummaryView,
)

logger = logging.getLogger(__name__)

# Reserved prefixes planted by the synthetic generator
NAME_MARKER = "⟨N⟩"
FEATURE_MARKER = "⟨F⟩"

FEATURE_DELIMITER = ";"

Demonstration = Tuple[str, str, Sequence[str]]


# =============================================================================
# Prompt Templates
# =============================================================================

class PromptTemplates:
    """In-context prompt for the ASR summarizer"""

    SYSTEM_INSTRUCTION = (
        "You are a text cleaning expert. The input is the speech transcript of an "
        "E-commerce video. Drop the chatting that has nothing to do with the product "
        "on sale, then report the name of the product and its major features in the "
        "output format shown. If no product is described, answer Unknown for both "
        "fields."
    )

    OUTPUT_FORMAT = (
        "Product name: ${name of the product}\n"
        "Features: ${major features of the product}"
    )

    DEFAULT_DEMONSTRATIONS: List[Demonstration] = [
        (
            "hi everyone welcome back, ok look at this one, the space UFO shaped shaver, "
            "it's tiny and fits in any pocket so you can take it anywhere, charge it with "
            "USB and it runs for a whole month, and today it's only 199 yuan, hurry up "
            "before the stock is gone",
            "Space UFO shaped shaver",
            ["Price 199 yuan", "portable style", "USB charging", "one charge lasts a month"],
        ),
    ]


def build_prompt(raw_asr: str, demonstrations: Optional[Sequence[Demonstration]] = None) -> str:
    """
    Assemble the summarizer prompt

    Args:
        raw_asr: Transcript placed in the final Input slot
        demonstrations: (input, name, features) examples, in order

    Returns:
        Instruction, worked examples, the query and the output stanza
    """
    if not raw_asr:
        raise ValueError("raw_asr must be non-empty")
    demos = PromptTemplates.DEFAULT_DEMONSTRATIONS if demonstrations is None else list(demonstrations)
    if not demos:
        raise ValueError("at least one demonstration is required")

    parts = [PromptTemplates.SYSTEM_INSTRUCTION, ""]
    for i, (demo_input, demo_name, demo_features) in enumerate(demos, start=1):
        parts.extend([
            f"Example {i}:",
            f"Input: {demo_input}",
            "Output:",
            _stanza(demo_name, demo_features),
            "",
        ])
    parts.extend([f"Input: {raw_asr}", "Output:", PromptTemplates.OUTPUT_FORMAT])
    return "\n".join(parts)


# =============================================================================
# Text Rendering
# =============================================================================

def spoken_text(raw: str) -> str:
    """Raw text with the generator's marker prefixes removed"""
    return raw.replace(NAME_MARKER, "").replace(FEATURE_MARKER, "")


def _stanza(name: str, features: Sequence[str]) -> str:
    return f"Product name: {name}\nFeatures: {'; '.join(features)}"


def render_stanza(record: SummaryRecord) -> str:
    """
    Output stanza of a summary

    Non-ok records render as the Unknown/Unknown placeholder. For ok records
    whose features never equal "Unknown" this is the inverse of parse_llm_output.
    """
    if record.status is not SummaryStatus.OK:
        return _stanza("Unknown", ["Unknown"])
    return _stanza(record.product_name, record.features)


def summary_text(record: SummaryRecord) -> str:
    """Text fed to the text encoder and measured for the signal level"""
    if record.status is SummaryStatus.ASR_MISSING:
        return ASR_MISSING_TEXT
    if record.status is SummaryStatus.NO_OUTPUT:
        return NO_OUTPUT_TEXT
    if record.view is SummaryView.NAME_ONLY:
        return record.product_name
    if record.view in (SummaryView.FEATURES_ONLY, SummaryView.RAW):
        return " ".join(record.features)
    return " ".join([record.product_name, *record.features])


def _no_output(instance_id: Optional[str] = None) -> SummaryRecord:
    return SummaryRecord(instance_id=instance_id, status=SummaryStatus.NO_OUTPUT)


def _finalize(name: str, features: List[str], raw: Optional[str],
              view: SummaryView = SummaryView.FULL) -> SummaryRecord:
    """Build an ok record whose signal level is measured against the spoken raw text"""
    draft = SummaryRecord(product_name=name, features=features, status=SummaryStatus.OK,
                          signal_level=1.0, view=view)
    text_len = len(summary_text(draft))
    raw_len = len(spoken_text(raw)) if raw is not None else text_len
    if text_len == 0 or raw_len == 0:
        return _no_output()
    return draft.model_copy(update={"signal_level": text_len / raw_len})


# =============================================================================
# Parsing
# =============================================================================

_NAME_RE = re.compile(r"product\s*name\s*[:：](?P<name>[^\n]*)", re.IGNORECASE)
_FEATURES_RE = re.compile(r"features\s*[:：](?P<features>[^\n]*)", re.IGNORECASE)
_INLINE_FEATURES_RE = re.compile(r"[;；]?\s*features\s*[:：]", re.IGNORECASE)


def parse_llm_output(completion: str, raw_text: Optional[str] = None) -> SummaryRecord:
    """
    Extract the product name and feature list from a completion

    Accepts the two-line stanza and the one-line "Product name: X; Features: Y"
    form. A missing or "Unknown" name yields no_output. "Unknown" is the
    placeholder for an absent value, so such feature entries are dropped.
    Without raw_text the signal level is measured against the summary
    itself (1.0).
    """
    name_match = _NAME_RE.search(completion or "")
    if not name_match:
        return _no_output()

    name = _INLINE_FEATURES_RE.split(name_match.group("name"), maxsplit=1)[0]
    name = name.strip().rstrip(";；").strip()
    if not name or name.lower() == "unknown":
        return _no_output()

    features: List[str] = []
    features_match = _FEATURES_RE.search(completion, name_match.start())
    if features_match:
        for item in re.split(r"[;；]", features_match.group("features")):
            item = item.strip()
            if item and item.lower() != "unknown":
                features.append(item)

    return _finalize(name, features, raw_text)


# =============================================================================
# Local Summarizers
# =============================================================================

def mock_summarize(raw: str) -> SummaryRecord:
    """
    Deterministic stand-in for the LLM: collect marker-prefixed tokens

    Name tokens join into the product name, feature tokens become features;
    repeated payloads keep their first position.
    """
    names: List[str] = []
    features: List[str] = []
    for token in raw.split():
        if token.startswith(NAME_MARKER):
            payload = token[len(NAME_MARKER):]
            if payload and payload not in names:
                names.append(payload)
        elif token.startswith(FEATURE_MARKER):
            payload = token[len(FEATURE_MARKER):]
            if payload and payload not in features:
                features.append(payload)

    if not names:
        return _no_output()
    return _finalize(" ".join(names), features, raw)


_WORD_RE = re.compile(r"\w+(?:-\w+)*")


def keyword_baseline(raw: str, k: Optional[int] = None,
                     stopwords: Optional[Iterable[str]] = None) -> SummaryRecord:
    """
    Frequency keywords: the k most frequent non-stopword tokens

    Ties keep first-occurrence order; the top token doubles as the name.
    """
    k = settings.summarizer_keywords if k is None else k
    if k < 1:
        raise ValueError("k must be >= 1")
    stop = ENGLISH_STOP_WORDS if stopwords is None else frozenset(stopwords)

    tokens = [t for t in _WORD_RE.findall(spoken_text(raw).lower()) if t not in stop]
    if not tokens:
        return _no_output()

    # most_common keeps insertion order among equal counts
    top = [token for token, _ in Counter(tokens).most_common(k)]
    return _finalize(top[0], top, raw)


def raw_passthrough(raw: str) -> SummaryRecord:
    """The whole spoken text as a single feature"""
    text = spoken_text(raw).strip()
    if not text:
        return _no_output()
    return SummaryRecord(features=[text], status=SummaryStatus.OK, signal_level=1.0,
                         view=SummaryView.RAW)


def apply_view(record: SummaryRecord, view: SummaryView, raw: str) -> SummaryRecord:
    """Restrict an ok summary to its name or its features"""
    if record.status is not SummaryStatus.OK:
        return record
    if view is SummaryView.FEATURES_ONLY and not record.features:
        return _no_output(record.instance_id)
    return _finalize(record.product_name, list(record.features), raw, view=view)


# =============================================================================
# Signal Buckets
# =============================================================================

SIGNAL_BUCKETS: List[str] = [
    "0 (LLM No-output)",
    "(0,0.05)",
    "[0.05,0.1)",
    "[0.1,0.15)",
    "[0.15,0.2)",
    "[0.2,0.25)",
    "≥0.25",
]

_BUCKET_EDGES = (0.05, 0.1, 0.15, 0.2, 0.25)


def signal_bucket(level: float) -> str:
    """Robustness-table row label for a signal level"""
    if not level >= 0.0:
        raise ValueError(f"signal level must be >= 0, got {level}")
    if level == 0.0:
        return SIGNAL_BUCKETS[0]
    for i, edge in enumerate(_BUCKET_EDGES, start=1):
        if level < edge:
            return SIGNAL_BUCKETS[i]
    return SIGNAL_BUCKETS[-1]


# =============================================================================
# Remote LLM Client
# =============================================================================

class RemoteLLMClient:
    """
    HTTP JSON summarizer client

    Request {prompt, max_tokens, model} -> response {completion}. Each request
    carries a correlation id; at most max_concurrency requests are in flight.
    """

    def __init__(
        self,
        endpoint_url: Optional[str] = None,
        api_key: Optional[str] = None,
        model: Optional[str] = None,
        max_tokens: Optional[int] = None,
        timeout: Optional[float] = None,
        max_retries: Optional[int] = None,
        backoff_min: Optional[float] = None,
        backoff_max: Optional[float] = None,
        max_concurrency: Optional[int] = None,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        self.endpoint_url = endpoint_url or settings.llm_endpoint_url
        if not self.endpoint_url:
            raise ValueError("LLM endpoint not configured (set LLM_ENDPOINT_URL)")
        self.model = model or settings.llm_model
        self.max_tokens = max_tokens or settings.llm_max_tokens
        self.max_retries = max_retries or settings.llm_max_retries
        self.backoff_min = settings.llm_backoff_min if backoff_min is None else backoff_min
        self.backoff_max = settings.llm_backoff_max if backoff_max is None else backoff_max
        self.max_concurrency = max_concurrency or settings.llm_max_concurrency

        headers = {}
        token = api_key or settings.llm_api_key
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._client = httpx.Client(timeout=timeout or settings.llm_timeout,
                                    headers=headers, transport=transport)
        self._limiter = threading.BoundedSemaphore(self.max_concurrency)
        logger.info(f"Remote LLM client initialized ({self.model} @ {self.endpoint_url})")

    def __enter__(self) -> "RemoteLLMClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        self._client.close()

    def _post(self, prompt: str, correlation_id: str) -> str:
        response = self._client.post(
            self.endpoint_url,
            json={"prompt": prompt, "max_tokens": self.max_tokens, "model": self.model},
            headers={"X-Request-ID": correlation_id},
        )
        response.raise_for_status()
        completion = response.json().get("completion")
        if not isinstance(completion, str):
            raise ValueError("response has no 'completion' string")
        return completion

    def complete(self, prompt: str, correlation_id: Optional[str] = None) -> LlmExchange:
        """Send one prompt with bounded retries and exponential backoff"""
        correlation_id = correlation_id or uuid.uuid4().hex
        retrying = Retrying(
            stop=stop_after_attempt(self.max_retries),
            wait=wait_exponential(multiplier=1, min=self.backoff_min, max=self.backoff_max),
            retry=retry_if_exception_type((httpx.HTTPError, ValueError)),
        )
        start = time.perf_counter()
        with self._limiter:
            try:
                for attempt in retrying:
                    with attempt:
                        completion = self._post(prompt, correlation_id)
            except RetryError as e:
                attempts = e.last_attempt.attempt_number
                cause = e.last_attempt.exception()
                logger.error(f"LLM request {correlation_id} failed: {cause}")
                raise LLMTransportError(f"LLM request {correlation_id} failed: {cause}", attempts=attempts) from cause

        return LlmExchange(
            prompt=prompt,
            completion=completion,
            latency_ms=int((time.perf_counter() - start) * 1000),
            attempt=attempt.retry_state.attempt_number,
            correlation_id=correlation_id,
        )

    def complete_many(
        self,
        prompts: Sequence[str],
        return_exceptions: bool = False
    ) -> List[Union[LlmExchange, LLMTransportError]]:
        """Complete prompts concurrently; results come back in input order"""
        ids = [uuid.uuid4().hex for _ in prompts]
        results: Dict[str, Union[LlmExchange, LLMTransportError]] = {}

        def _one(pair: Tuple[str, str]) -> Tuple[str, Union[LlmExchange, LLMTransportError]]:
            correlation_id, prompt = pair
            try:
                return correlation_id, self.complete(prompt, correlation_id)
            except LLMTransportError as e:
                if not return_exceptions:
                    raise
                return correlation_id, e

        with ThreadPoolExecutor(max_workers=self.max_concurrency) as pool:
            for correlation_id, outcome in pool.map(_one, zip(ids, prompts)):
                results[correlation_id] = outcome
        return [results[cid] for cid in ids]


# =============================================================================
# Summarization Entry Points
# =============================================================================

_LLM_FILTER_VIEWS = {
    SummarizerKind.NAME_ONLY: SummaryView.NAME_ONLY,
    SummarizerKind.FEATURES_ONLY: SummaryView.FEATURES_ONLY,
}


def _summarize_text(raw: str, kind: SummarizerKind, client: Optional[RemoteLLMClient],
                    demonstrations: Optional[Sequence[Demonstration]]) -> SummaryRecord:
    if kind is SummarizerKind.LLM_MOCK:
        return mock_summarize(raw)
    if kind is SummarizerKind.KEYWORD_BASELINE:
        return keyword_baseline(raw)
    if kind is SummarizerKind.RAW_PASSTHROUGH:
        return raw_passthrough(raw)
    if kind is SummarizerKind.LLM_REMOTE:
        if client is None:
            raise ValueError("llm_remote requires a RemoteLLMClient")
        exchange = client.complete(build_prompt(spoken_text(raw), demonstrations))
        return parse_llm_output(exchange.completion, raw_text=raw)
    # name_only / features_only filter the LLM output (remote when a client is given)
    base_kind = SummarizerKind.LLM_REMOTE if client is not None else SummarizerKind.LLM_MOCK
    return apply_view(_summarize_text(raw, base_kind, client, demonstrations),
                      _LLM_FILTER_VIEWS[kind], raw)


def summarize(
    instance: ProductInstance,
    kind: Union[SummarizerKind, str],
    client: Optional[RemoteLLMClient] = None,
    demonstrations: Optional[Sequence[Demonstration]] = None
) -> SummaryRecord:
    """
    Summarize one instance's raw text

    A missing transcript short-circuits to asr_missing without touching any
    backend. Transport failures of the remote backend propagate as
    LLMTransportError.
    """
    kind = SummarizerKind(kind)
    if instance.raw_text == ASR_MISSING_TEXT:
        return SummaryRecord(instance_id=instance.instance_id, status=SummaryStatus.ASR_MISSING)
    record = _summarize_text(instance.raw_text, kind, client, demonstrations)
    return record.model_copy(update={"instance_id": instance.instance_id})


def summarize_dataset(
    instances: Sequence[ProductInstance],
    kind: Union[SummarizerKind, str],
    client: Optional[RemoteLLMClient] = None,
    degrade_on_failure: bool = True,
    demonstrations: Optional[Sequence[Demonstration]] = None
) -> List[SummaryRecord]:
    """
    Summarize every instance, in input order

    Remote requests are batched through the client's bounded pool; a failed
    request becomes no_output when degrade_on_failure is set.
    """
    kind = SummarizerKind(kind)
    uses_remote = kind is SummarizerKind.LLM_REMOTE or (kind in _LLM_FILTER_VIEWS and client is not None)

    if not uses_remote:
        with ThreadPoolExecutor(max_workers=settings.worker_concurrency) as pool:
            records = list(pool.map(lambda inst: summarize(inst, kind), instances))
        logger.info(f"✓ Summarized {len(records)} instances ({kind.value})")
        return records

    if client is None:
        raise ValueError("llm_remote requires a RemoteLLMClient")

    pending = [i for i, inst in enumerate(instances) if inst.raw_text != ASR_MISSING_TEXT]
    prompts = [build_prompt(spoken_text(instances[i].raw_text), demonstrations) for i in pending]
    outcomes = client.complete_many(prompts, return_exceptions=degrade_on_failure)

    records: List[SummaryRecord] = [
        SummaryRecord(instance_id=inst.instance_id, status=SummaryStatus.ASR_MISSING)
        for inst in instances
    ]
    failures = 0
    for i, outcome in zip(pending, outcomes):
        inst = instances[i]
        if isinstance(outcome, LLMTransportError):
            failures += 1
            logger.warning(f"Summary for {inst.instance_id} degraded to no_output: {outcome}")
            record = _no_output()
        else:
            record = parse_llm_output(outcome.completion, raw_text=inst.raw_text)
            if kind in _LLM_FILTER_VIEWS:
                record = apply_view(record, _LLM_FILTER_VIEWS[kind], inst.raw_text)
        records[i] = record.model_copy(update={"instance_id": inst.instance_id})

    logger.info(f"✓ Summarized {len(records)} instances ({kind.value}, {failures} degraded)")
    return records


# =============================================================================
# Summarizer Accuracy
# =============================================================================

class LabeledSummary(BaseModel):
    """A summary paired with the generator's labels"""

    record: SummaryRecord
    true_name: str
    true_attributes: List[str]
    domain: DomainId


def _norm(text: str) -> str:
    return " ".join(text.lower().split())


def evaluate_summarizer(samples: Sequence[LabeledSummary]) -> Dict[str, SummarizerAccuracy]:
    """
    Name accuracy, attribute recall and attribute accuracy

    Returns:
        Metrics per domain present in the samples plus an "overall" entry
    """
    if not samples:
        raise ValueError("no samples to evaluate")

    groups: Dict[str, List[LabeledSummary]] = {"overall": list(samples)}
    for domain in DomainId.ordered():
        members = [s for s in samples if s.domain is domain]
        if members:
            groups[domain.value] = members

    results: Dict[str, SummarizerAccuracy] = {}
    for key, members in groups.items():
        name_hits = 0
        recalls: List[float] = []
        accuracies: List[float] = []
        for sample in members:
            record = sample.record
            ok = record.status is SummaryStatus.OK
            if ok and _norm(record.product_name) == _norm(sample.true_name):
                name_hits += 1
            extracted = {_norm(f) for f in record.features} if ok else set()
            truth = {_norm(a) for a in sample.true_attributes}
            hits = len(extracted & truth)
            recalls.append(hits / len(truth) if truth else 0.0)
            if extracted:
                accuracies.append(hits / len(extracted))
        results[key] = SummarizerAccuracy(
            domain=key,
            n_samples=len(members),
            name_accuracy=name_hits / len(members),
            attr_recall=sum(recalls) / len(recalls),
            attr_accuracy=sum(accuracies) / len(accuracies) if accuracies else None,
        )
    return results
