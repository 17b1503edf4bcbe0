"""Access to language-model backends: generation, mask filling, embedding.

Every backend speaks the same JSON request/response contract (see
``docs/protocol.md``). :class:`HttpBackend` sends it over HTTP with retries;
:class:`MockBackend` answers it in-process as a pure function of
``(seed, request)``, so runs against a mock are reproducible byte for byte.
"""

from __future__ import annotations

import hashlib
import logging
import math
import re
import threading
import time
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Any, NamedTuple, Union

import numpy as np
import requests
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .errors import (
    BackendKindError,
    BackendRejection,
    DimensionMismatch,
    NoMaskMarker,
    SchemaError,
    Timeout,
    TransportError,
)
from .prompts import (
    DEFAULT_MASK,
    PromptTemplate,
    TemplateStyle,
    Verbalizer,
    render_zero_shot,
)
from .vector_store import DEFAULT_DIM, LabelSource, SentencePool, as_vector

log = logging.getLogger(__name__)

MOCK_SCHEME = "mock:"
TRANSIENT_STATUS = frozenset({408, 425, 429, 500, 502, 503, 504})


class BackendKind(str, Enum):
    GENERATION = "generation"
    FILL_MASK = "fill_mask"
    EMBEDDING = "embedding"


class DecodeParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    max_new_tokens: int = Field(64, ge=1)
    temperature: float = Field(0.0, ge=0.0)
    stop_sequences: tuple[str, ...] = ()


class BackendDescriptor(BaseModel):
    """How to reach one model backend.

    ``max_retries`` is the total number of attempts per request (at least
    one is always made). ``max_concurrency`` bounds in-flight requests and
    ``min_interval`` spaces request starts, both per backend handle.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: BackendKind
    endpoint: str
    model_name: str = "mock"
    timeout: float = Field(60.0, gt=0.0)
    max_retries: int = Field(3, ge=0)
    retry_backoff: float = Field(0.5, ge=0.0)
    decode_params: DecodeParams = DecodeParams()
    dim: int | None = Field(None, ge=1)
    max_concurrency: int = Field(4, ge=1)
    min_interval: float = Field(0.0, ge=0.0)

    @field_validator("endpoint")
    @classmethod
    def _endpoint_scheme(cls, v: str) -> str:
        if not (v.startswith(MOCK_SCHEME) or v.startswith("http://") or v.startswith("https://")):
            raise ValueError(f"endpoint must be http(s):// or {MOCK_SCHEME}<seed>, got {v!r}")
        return v

    @property
    def is_mock(self) -> bool:
        return self.endpoint.startswith(MOCK_SCHEME)

    @property
    def embedding_dim(self) -> int:
        return self.dim if self.dim is not None else DEFAULT_DIM

    def cache_key(self) -> str:
        """Identity of the model output, ignoring transport tuning."""
        ident = f"{self.kind.value}|{self.endpoint}|{self.model_name}|{self.dim}|{self.decode_params.model_dump_json()}"
        return hashlib.sha256(ident.encode("utf-8")).hexdigest()


class ParseStatus(str, Enum):
    MATCHED = "matched"
    FALLBACK = "fallback"
    UNPARSED = "unparsed"


class CandidateScore(NamedTuple):
    word: str
    score: float
    flagged: bool = False


RawOutput = Union[str, list[CandidateScore], None]


@dataclass(frozen=True)
class Prediction:
    raw_output: RawOutput
    mapped_label: str | None
    parse_status: ParseStatus
    error: str | None = None

    def __post_init__(self) -> None:
        if self.parse_status is not ParseStatus.UNPARSED and self.mapped_label is None:
            raise ValueError(f"{self.parse_status.value} prediction needs a mapped label")

    @classmethod
    def failed(cls, error: str) -> Prediction:
        return cls(None, None, ParseStatus.UNPARSED, error)


def normalize_answer(text: str) -> str:
    return " ".join(text.strip().lower().split())


@dataclass(frozen=True)
class LabelOptionSet:
    """Canonical task labels, each with the surface strings that denote it."""

    entries: tuple[tuple[str, tuple[str, ...]], ...]

    def __post_init__(self) -> None:
        entries = tuple((str(lbl), tuple(str(s) for s in surfaces)) for lbl, surfaces in self.entries)
        if not entries:
            raise SchemaError("label option set is empty")
        labels = [lbl for lbl, _ in entries]
        if len(set(labels)) != len(labels):
            raise SchemaError(f"duplicate labels in option set: {labels}")
        seen: dict[str, str] = {}
        for lbl, surfaces in entries:
            for s in surfaces:
                key = normalize_answer(s)
                if not key:
                    raise SchemaError(f"empty surface option for label {lbl!r}")
                if seen.get(key, lbl) != lbl:
                    raise SchemaError(f"surface option {s!r} used by both {seen[key]!r} and {lbl!r}")
                seen[key] = lbl
        object.__setattr__(self, "entries", entries)

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Sequence[str] | str]) -> LabelOptionSet:
        return cls(tuple((lbl, (s,) if isinstance(s, str) else tuple(s)) for lbl, s in mapping.items()))

    @classmethod
    def for_template(cls, t: PromptTemplate, base: LabelOptionSet | None = None) -> LabelOptionSet:
        """Merge a template's option strings into ``base`` (whose labels win)."""
        tmpl = t.option_map
        labels = base.labels if base is not None else list(tmpl)
        merged = []
        for lbl in labels:
            surfaces = list(base.surfaces_for(lbl)) if base is not None else []
            if lbl in tmpl and normalize_answer(tmpl[lbl]) not in {normalize_answer(s) for s in surfaces}:
                surfaces.insert(0, tmpl[lbl])
            merged.append((lbl, tuple(surfaces)))
        return cls(tuple(merged))

    @property
    def labels(self) -> list[str]:
        return [lbl for lbl, _ in self.entries]

    def surfaces_for(self, label: str) -> tuple[str, ...]:
        for lbl, surfaces in self.entries:
            if lbl == label:
                return surfaces
        raise KeyError(label)

    def all_surfaces(self) -> list[str]:
        return [s for _, surfaces in self.entries for s in surfaces]

    def to_dict(self) -> dict[str, list[str]]:
        return {lbl: list(s) for lbl, s in self.entries}


def map_generation_to_label(raw: str, options: LabelOptionSet, fallback: str | None = None) -> Prediction:
    """Map free-form generated text onto a task label.

    The longest option string found inside the normalized output wins;
    equal lengths go to the earliest occurrence, then to option order.
    """
    norm = normalize_answer(raw or "")
    best: tuple[int, int, int, str] | None = None
    order = 0
    for lbl, surfaces in options.entries:
        for s in surfaces:
            key = normalize_answer(s)
            pos = norm.find(key)
            if pos >= 0:
                rank = (-len(key), pos, order, lbl)
                if best is None or rank < best:
                    best = rank
            order += 1
    if best is not None:
        return Prediction(raw, best[3], ParseStatus.MATCHED)
    if fallback is not None:
        return Prediction(raw, fallback, ParseStatus.FALLBACK)
    return Prediction(raw, None, ParseStatus.UNPARSED)


def _digest(*parts: Any) -> bytes:
    h = hashlib.sha256()
    for p in parts:
        h.update(str(p).encode("utf-8"))
        h.update(b"\x1f")
    return h.digest()


def _unit_interval(*parts: Any) -> float:
    return int.from_bytes(_digest(*parts)[:8], "big") / 2.0**64


class Backend:
    """Shared client-side logic; subclasses implement :meth:`_request`."""

    def __init__(self, descriptor: BackendDescriptor) -> None:
        self.descriptor = descriptor
        self._slots = threading.BoundedSemaphore(descriptor.max_concurrency)
        self._pace_lock = threading.Lock()
        self._next_start = 0.0

    def _request(self, inputs: list[str], params: dict[str, Any]) -> dict[str, Any]:
        raise NotImplementedError

    def _pace(self) -> None:
        interval = self.descriptor.min_interval
        if interval <= 0:
            return
        with self._pace_lock:
            now = time.monotonic()
            wait = self._next_start - now
            self._next_start = max(now, self._next_start) + interval
        if wait > 0:
            time.sleep(wait)

    def call(self, inputs: list[str], params: dict[str, Any]) -> dict[str, Any]:
        with self._slots:
            self._pace()
            return self._request(inputs, params)

    def _expect(self, kind: BackendKind) -> None:
        if self.descriptor.kind is not kind:
            raise BackendKindError(f"{kind.value} requested from a {self.descriptor.kind.value} backend")

    def generate(self, prompt: str, options: Sequence[str] | None = None) -> str:
        self._expect(BackendKind.GENERATION)
        dp = self.descriptor.decode_params
        params: dict[str, Any] = {
            "max_new_tokens": dp.max_new_tokens,
            "temperature": dp.temperature,
            "stop_sequences": list(dp.stop_sequences),
        }
        if options:
            params["options"] = list(options)
        outputs = self.call([prompt], params).get("outputs")
        if not isinstance(outputs, list) or len(outputs) != 1 or not isinstance(outputs[0], str):
            raise BackendRejection("generation response must carry exactly one output string")
        return trim_at_stop(outputs[0], dp.stop_sequences)

    def fill_mask(self, prompt: str, candidates: Sequence[str], mask_token: str = DEFAULT_MASK) -> list[CandidateScore]:
        self._expect(BackendKind.FILL_MASK)
        n_masks = prompt.count(mask_token)
        if n_masks != 1:
            raise NoMaskMarker(f"prompt must contain exactly one {mask_token}, found {n_masks}")
        if not candidates:
            raise ValueError("fill_mask needs at least one candidate")
        resp = self.call([prompt], {"candidates": list(candidates), "mask_token": mask_token})
        scores = resp.get("scores")
        if isinstance(scores, list) and len(scores) == 1 and isinstance(scores[0], list):
            scores = scores[0]
        if not isinstance(scores, list) or len(scores) != len(candidates):
            raise BackendRejection("fill_mask response must score every candidate")
        out = []
        for word, s in zip(candidates, scores):
            if s is None or not isinstance(s, (int, float)) or not math.isfinite(s):
                log.warning("backend could not score candidate %r; treating it as -inf", word)
                out.append(CandidateScore(word, -math.inf, True))
            else:
                out.append(CandidateScore(word, float(s)))
        return out

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        self._expect(BackendKind.EMBEDDING)
        if not texts:
            raise ValueError("embed needs at least one text")
        vectors = self.call(list(texts), {"dim": self.descriptor.embedding_dim}).get("vectors")
        if not isinstance(vectors, list) or len(vectors) != len(texts):
            raise BackendRejection("embedding response must carry one vector per input")
        dim = self.descriptor.embedding_dim
        out = []
        for vec in vectors:
            v = as_vector(vec)
            if v.shape[0] != dim:
                raise DimensionMismatch(f"backend returned dim {v.shape[0]}, configured dim is {dim}")
            out.append(v)
        return out


def trim_at_stop(text: str, stops: Sequence[str]) -> str:
    cut = len(text)
    for s in stops:
        if s:
            i = text.find(s)
            if 0 <= i < cut:
                cut = i
    return text[:cut]


class HttpBackend(Backend):
    def __init__(self, descriptor: BackendDescriptor) -> None:
        super().__init__(descriptor)
        self._local = threading.local()

    def _session(self) -> requests.Session:
        session = getattr(self._local, "session", None)
        if session is None:
            session = self._local.session = requests.Session()
        return session

    def _request(self, inputs: list[str], params: dict[str, Any]) -> dict[str, Any]:
        d = self.descriptor
        body = {"model": d.model_name, "kind": d.kind.value, "inputs": inputs, "params": params}
        attempts = max(1, d.max_retries)
        last: TransportError | None = None
        for attempt in range(1, attempts + 1):
            if attempt > 1 and d.retry_backoff > 0:
                time.sleep(d.retry_backoff * 2 ** (attempt - 2))
            try:
                resp = self._session().post(d.endpoint, json=body, timeout=d.timeout)
            except requests.Timeout as exc:
                last = Timeout(f"{d.endpoint} timed out: {exc}", attempts=attempt)
                continue
            except requests.RequestException as exc:
                last = TransportError(f"{d.endpoint} unreachable: {exc}", attempts=attempt)
                continue
            if resp.status_code in TRANSIENT_STATUS:
                last = TransportError(f"{d.endpoint} returned HTTP {resp.status_code}", attempts=attempt)
                continue
            if not resp.ok:
                raise BackendRejection(
                    f"{d.endpoint} returned HTTP {resp.status_code}: {resp.text[:200]}", status=resp.status_code
                )
            try:
                payload = resp.json()
            except ValueError:
                raise BackendRejection(f"{d.endpoint} returned a non-JSON body", status=resp.status_code) from None
            if not isinstance(payload, dict) or payload.get("status") != "ok":
                detail = payload.get("error") if isinstance(payload, dict) else None
                raise BackendRejection(f"{d.endpoint} rejected the request: {detail or payload!r}", status=resp.status_code)
            return payload
        assert last is not None
        raise last


class MockBackend(Backend):
    """Deterministic stand-in for a real model, keyed by the endpoint seed.

    * generation with ``options``: majority vote over prompt lines that equal
      an option (demonstration answers); ties and no votes fall back to a
      seeded hash choice. Without options it returns a seeded window of
      the final prompt block.
    * fill_mask: whole-word count of each candidate in the prompt plus a
      seeded jitter in [0, 0.5).
    * embedding: a seeded Gaussian vector per text.
    """

    def __init__(self, descriptor: BackendDescriptor) -> None:
        super().__init__(descriptor)
        self.seed = descriptor.endpoint[len(MOCK_SCHEME) :]

    def _request(self, inputs: list[str], params: dict[str, Any]) -> dict[str, Any]:
        kind = self.descriptor.kind
        if kind is BackendKind.GENERATION:
            return {"status": "ok", "outputs": [self._generate(p, params) for p in inputs]}
        if kind is BackendKind.FILL_MASK:
            return {"status": "ok", "scores": [self._fill(p, params["candidates"]) for p in inputs]}
        return {"status": "ok", "vectors": [self._embed(t, params["dim"]).tolist() for t in inputs]}

    def _choice(self, items: Sequence[str], *key: Any) -> str:
        return items[int.from_bytes(_digest(self.seed, *key)[:8], "big") % len(items)]

    def _generate(self, prompt: str, params: Mapping[str, Any]) -> str:
        options = params.get("options")
        if options:
            canon = {normalize_answer(o): o for o in options}
            votes = dict.fromkeys(canon, 0)
            for line in prompt.splitlines():
                key = normalize_answer(line)
                if key in votes:
                    votes[key] += 1
            top = max(votes.values())
            tied = sorted(k for k, n in votes.items() if n == top)
            return canon[self._choice(tied, "generate", prompt)]
        tokens = prompt.split("\n\n")[-1].split()
        width = min(int(params.get("max_new_tokens", 64)), len(tokens))
        start = int(_unit_interval(self.seed, "window", prompt) * (len(tokens) - width + 1))
        return " ".join(tokens[start : start + width])

    def _fill(self, prompt: str, candidates: Sequence[str]) -> list[float]:
        lowered = prompt.lower()
        scores = []
        for word in candidates:
            count = len(re.findall(rf"(?<!\w){re.escape(word.lower())}(?!\w)", lowered))
            scores.append(count + 0.5 * _unit_interval(self.seed, "fill", prompt, word))
        return scores

    def _embed(self, text: str, dim: int) -> np.ndarray:
        rng = np.random.default_rng(np.frombuffer(_digest(self.seed, "embed", text), dtype=np.uint32))
        return rng.standard_normal(dim)


_handles: dict[BackendDescriptor, Backend] = {}
_handles_lock = threading.Lock()


def connect(descriptor: BackendDescriptor | Backend) -> Backend:
    """Return the shared handle for ``descriptor`` (created on first use)."""
    if isinstance(descriptor, Backend):
        return descriptor
    with _handles_lock:
        handle = _handles.get(descriptor)
        if handle is None:
            cls = MockBackend if descriptor.is_mock else HttpBackend
            handle = _handles[descriptor] = cls(descriptor)
        return handle


BackendLike = Union[BackendDescriptor, Backend]


def generate(b: BackendLike, prompt: str, options: Sequence[str] | None = None) -> str:
    return connect(b).generate(prompt, options)


def fill_mask(b: BackendLike, prompt: str, candidates: Sequence[str], mask_token: str = DEFAULT_MASK) -> list[CandidateScore]:
    return connect(b).fill_mask(prompt, candidates, mask_token)


def embed(b: BackendLike, texts: Sequence[str]) -> list[np.ndarray]:
    return connect(b).embed(texts)


def best_candidate(scores: Sequence[CandidateScore]) -> CandidateScore | None:
    """Highest-scoring candidate (first wins ties); None when none was scorable."""
    usable = [c for c in scores if not c.flagged]
    if not usable:
        return None
    return max(usable, key=lambda c: c.score)


def predict_generative(
    b: BackendLike, prompt: str, options: LabelOptionSet, fallback: str | None = None
) -> Prediction:
    raw = generate(b, prompt, options.all_surfaces())
    return map_generation_to_label(raw, options, fallback)


def predict_masked(
    b: BackendLike,
    prompt: str,
    verbalizer: Verbalizer,
    mask_token: str = DEFAULT_MASK,
    fallback: str | None = None,
) -> Prediction:
    scores = fill_mask(b, prompt, verbalizer.words, mask_token)
    best = best_candidate(scores)
    if best is not None:
        return Prediction(scores, verbalizer.invert(best.word), ParseStatus.MATCHED)
    if fallback is not None:
        return Prediction(scores, fallback, ParseStatus.FALLBACK)
    return Prediction(scores, None, ParseStatus.UNPARSED)


def predict(
    b: BackendLike,
    prompt: str,
    t: PromptTemplate,
    options: LabelOptionSet,
    fallback: str | None = None,
) -> Prediction:
    """Dispatch on template style: generate-and-map or fill-mask-and-invert."""
    if t.style is TemplateStyle.MASKED:
        if t.verbalizer is None:
            raise SchemaError(f"masked template {t.id!r} has no verbalizer")
        return predict_masked(b, prompt, t.verbalizer, t.mask_token, fallback)
    return predict_generative(b, prompt, LabelOptionSet.for_template(t, options), fallback)


def self_predict_labels(
    pool: SentencePool,
    b: BackendLike,
    t: PromptTemplate,
    options: LabelOptionSet,
    fallback: str | None = None,
    task_meta: Mapping[str, Any] | None = None,
    parallelism: int = 1,
) -> SentencePool:
    """Label every unlabeled pool entry with the model's own zero-shot answer.

    Corpus labels are left alone. Unparsed answers get ``fallback``, which
    defaults to the first label of ``options``. Any backend error propagates
    before a new pool is built, so the caller never sees a half-labeled pool.
    """
    fallback = options.labels[0] if fallback is None else fallback
    todo = [e for e in pool.entries if e.label is None]
    if not todo:
        return pool

    def label_one(text: str) -> str:
        prompt = render_zero_shot(text, t, task_meta).full_text
        pred = predict(b, prompt, t, options, fallback)
        return pred.mapped_label or fallback

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as ex:
        labels = list(ex.map(label_one, [e.text for e in todo]))
    assigned = {e.id: lbl for e, lbl in zip(todo, labels)}
    return pool.replace(
        e.with_label(assigned[e.id], LabelSource.SELF_PREDICTED) if e.id in assigned else e for e in pool.entries
    )
