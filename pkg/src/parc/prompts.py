"""Prompt templates, verbalizers and retrieval-augmented prompt assembly.

A prompt is a sequence of demonstration blocks followed by the query block,
separated by one blank line. Each demonstration is the template rendered on
a retrieved pool text with its answer filled in:

* generative templates append the answer on the next line, using the
  template's option string for the label (or the raw label when the
  template lists no options);
* masked templates substitute the verbalized label for the mask marker.

The query block is the plain zero-shot rendering, so a prompt with no
demonstrations is exactly the zero-shot prompt.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Any

from .errors import (
    DanglingHitId,
    DuplicateTemplateId,
    MissingSlotValue,
    SchemaError,
    UnknownTemplate,
    UnlabeledEntry,
    VerbalizerMiss,
)
from .vector_store import PoolEntry, RetrievalResult, SentencePool

TEXT_SLOT = "{text}"
TARGET_LANG_SLOT = "{target_lang}"
DEFAULT_MASK = "[MASK]"
DEMO_SEPARATOR = "\n\n"
REGISTRY_VERSION = 1

SHIPPED_REGISTRIES = (
    "viol-lens-main",
    "viol-lens-generative",
    "viol-lens-masked",
    "sentnob",
    "xlsum",
)

_SLOT_RE = re.compile(r"\{(text|target_lang)\}")


class TemplateStyle(str, Enum):
    GENERATIVE = "generative"
    MASKED = "masked"


@dataclass(frozen=True)
class Verbalizer:
    """Injective label -> answer word map used for mask filling."""

    mapping: Mapping[str, str]
    _inverse: dict[str, str] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        mapping = {str(k): str(v) for k, v in self.mapping.items()}
        if not mapping:
            raise SchemaError("verbalizer is empty")
        inverse = {w: lbl for lbl, w in mapping.items()}
        if len(inverse) != len(mapping):
            raise SchemaError(f"verbalizer is not injective: {mapping}")
        object.__setattr__(self, "mapping", mapping)
        object.__setattr__(self, "_inverse", inverse)

    @property
    def labels(self) -> list[str]:
        return list(self.mapping)

    @property
    def words(self) -> list[str]:
        return list(self.mapping.values())

    def covers(self, labels: Sequence[Any]) -> bool:
        return all(str(lbl) in self.mapping for lbl in labels)

    def apply(self, label: Any) -> str:
        try:
            return self.mapping[str(label)]
        except KeyError:
            raise VerbalizerMiss(f"label {label!r} not in verbalizer {self.labels}") from None

    def invert(self, word: str) -> str:
        try:
            return self._inverse[word]
        except KeyError:
            raise VerbalizerMiss(f"word {word!r} not in verbalizer {self.words}") from None


def apply_verbalizer(v: Verbalizer, label: Any) -> str:
    return v.apply(label)


def invert_verbalizer(v: Verbalizer, word: str) -> str:
    return v.invert(word)


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    style: TemplateStyle
    body: str
    language: str = "en"
    mask_token: str = DEFAULT_MASK
    # ordered (label, option string) pairs; generative classification only
    options: tuple[tuple[str, str], ...] | None = None
    verbalizer: Verbalizer | None = None
    task: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "style", TemplateStyle(self.style))
        if self.body.count(TEXT_SLOT) != 1:
            raise SchemaError(f"template {self.id!r}: body must contain {TEXT_SLOT} exactly once")
        if self.style is TemplateStyle.MASKED and self.body.count(self.mask_token) != 1:
            raise SchemaError(f"template {self.id!r}: masked body must contain {self.mask_token} exactly once")
        if self.options is not None:
            opts = tuple((str(lbl), str(s)) for lbl, s in self.options)
            if len({lbl for lbl, _ in opts}) != len(opts):
                raise SchemaError(f"template {self.id!r}: duplicate label in options")
            object.__setattr__(self, "options", opts)

    @property
    def requires_target_lang(self) -> bool:
        return TARGET_LANG_SLOT in self.body

    @property
    def option_map(self) -> dict[str, str]:
        return dict(self.options or ())

    def answer_for(self, label: str) -> str:
        """Surface string a generative demonstration uses for ``label``."""
        if self.options is None:
            return label
        try:
            return self.option_map[label]
        except KeyError:
            raise VerbalizerMiss(f"template {self.id!r} has no option for label {label!r}") from None

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"id": self.id, "style": self.style.value, "body": self.body, "language": self.language}
        if self.mask_token != DEFAULT_MASK:
            d["mask_token"] = self.mask_token
        if self.options is not None:
            d["options"] = dict(self.options)
        if self.verbalizer is not None:
            d["verbalizer"] = dict(self.verbalizer.mapping)
        if self.task is not None:
            d["task"] = self.task
        return d


@dataclass(frozen=True)
class QueryExample:
    """A low-resource-language input to classify or summarize."""

    text: str
    id: str = ""
    gold_label: str | None = None
    reference_summary: str | None = None
    embedding: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if not isinstance(self.text, str) or not self.text:
            raise SchemaError(f"query example {self.id!r} has empty text")


@dataclass(frozen=True)
class AssembledPrompt:
    full_text: str
    demo_count: int
    template_id: str
    truncated: bool = False


def _fill(body: str, text: str, task_meta: Mapping[str, Any] | None, template_id: str) -> str:
    meta = task_meta or {}

    def sub(m: re.Match[str]) -> str:
        if m.group(1) == "text":
            return text
        value = meta.get("target_lang")
        if value is None:
            raise MissingSlotValue(f"template {template_id!r} needs target_lang")
        return str(value)

    return _SLOT_RE.sub(sub, body)


def render_zero_shot(
    q: QueryExample | str, t: PromptTemplate, task_meta: Mapping[str, Any] | None = None
) -> AssembledPrompt:
    text = q.text if isinstance(q, QueryExample) else q
    return AssembledPrompt(_fill(t.body, text, task_meta, t.id), 0, t.id)


def _demo_text(
    t: PromptTemplate,
    text: str,
    label: str,
    v: Verbalizer | None,
    task_meta: Mapping[str, Any] | None,
) -> str:
    if t.style is TemplateStyle.MASKED:
        v = v or t.verbalizer
        if v is None:
            raise VerbalizerMiss(f"masked template {t.id!r} needs a verbalizer")
        return _fill(t.body.replace(t.mask_token, v.apply(label)), text, task_meta, t.id)
    return _fill(t.body, text, task_meta, t.id) + "\n" + t.answer_for(label)


def render_demonstration(
    entry: PoolEntry,
    t: PromptTemplate,
    v: Verbalizer | None = None,
    task_meta: Mapping[str, Any] | None = None,
) -> str:
    if entry.label is None:
        raise UnlabeledEntry(f"pool entry {entry.id!r} has no label")
    return _demo_text(t, entry.text, entry.label, v, task_meta)


def assemble_prompt(
    q: QueryExample | str,
    r: RetrievalResult,
    pool: SentencePool | None,
    t: PromptTemplate,
    v: Verbalizer | None = None,
    task_meta: Mapping[str, Any] | None = None,
    max_chars: int | None = None,
) -> AssembledPrompt:
    """Build ``demonstrations + query`` for the retrieved hits.

    With ``max_chars`` set and exceeded, demonstration texts are cut from
    their end starting with the least similar one; if every demonstration
    text is already empty, whole demonstrations are dropped in the same
    order. The query block is never shortened.
    """
    query_block = render_zero_shot(q, t, task_meta).full_text
    demos: list[tuple[str, str]] = []
    for hit in r.hits:
        if pool is None or hit.entry_id not in pool:
            raise DanglingHitId(f"retrieved id {hit.entry_id!r} is not in the pool")
        entry = pool.get(hit.entry_id)
        if entry.label is None:
            raise UnlabeledEntry(f"pool entry {entry.id!r} has no label")
        demos.append((entry.text, entry.label))

    def join(items: list[tuple[str, str]]) -> str:
        blocks = [_demo_text(t, text, label, v, task_meta) for text, label in items]
        return DEMO_SEPARATOR.join([*blocks, query_block])

    full = join(demos)
    truncated = False
    if max_chars is not None and len(full) > max_chars:
        truncated = True
        for i in range(len(demos) - 1, -1, -1):
            excess = len(full) - max_chars
            if excess <= 0:
                break
            text, label = demos[i]
            demos[i] = (text[: max(0, len(text) - excess)], label)
            full = join(demos)
        while len(full) > max_chars and demos:
            demos.pop()
            full = join(demos)
    return AssembledPrompt(full, len(demos), t.id, truncated)


class TemplateRegistry(Mapping[str, PromptTemplate]):
    """Templates keyed by id, in file order."""

    def __init__(self, templates: Sequence[PromptTemplate] = ()) -> None:
        self._templates: dict[str, PromptTemplate] = {}
        for t in templates:
            self.add(t)

    def add(self, t: PromptTemplate) -> None:
        if t.id in self._templates:
            raise DuplicateTemplateId(f"duplicate template id {t.id!r}")
        self._templates[t.id] = t

    def merge(self, other: TemplateRegistry) -> TemplateRegistry:
        return TemplateRegistry([*self.values(), *other.values()])

    def __getitem__(self, template_id: str) -> PromptTemplate:
        try:
            return self._templates[template_id]
        except KeyError:
            raise UnknownTemplate(f"no template {template_id!r}") from None

    def __iter__(self) -> Iterator[str]:
        return iter(self._templates)

    def __len__(self) -> int:
        return len(self._templates)


_TEMPLATE_KEYS = {"id", "style", "body", "language", "mask_token", "options", "verbalizer", "task"}


def parse_template(raw: Mapping[str, Any], task: str | None = None) -> PromptTemplate:
    unknown = set(raw) - _TEMPLATE_KEYS
    if unknown:
        raise SchemaError(f"unknown template keys {sorted(unknown)}")
    for key in ("id", "style", "body"):
        if not isinstance(raw.get(key), str):
            raise SchemaError(f"template field {key!r} missing or not a string")
    try:
        style = TemplateStyle(raw["style"])
    except ValueError:
        raise SchemaError(f"template {raw['id']!r}: unknown style {raw['style']!r}") from None
    options = raw.get("options")
    if options is not None:
        if not isinstance(options, Mapping):
            raise SchemaError(f"template {raw['id']!r}: options must be an object")
        options = tuple(options.items())
    verbalizer = raw.get("verbalizer")
    if verbalizer is not None:
        if not isinstance(verbalizer, Mapping):
            raise SchemaError(f"template {raw['id']!r}: verbalizer must be an object")
        verbalizer = Verbalizer(verbalizer)
    return PromptTemplate(
        id=raw["id"],
        style=style,
        body=raw["body"],
        language=raw.get("language", "en"),
        mask_token=raw.get("mask_token", DEFAULT_MASK),
        options=options,
        verbalizer=verbalizer,
        task=raw.get("task", task),
    )


def parse_registry(doc: Any) -> TemplateRegistry:
    if not isinstance(doc, Mapping) or not isinstance(doc.get("templates"), list):
        raise SchemaError("registry must be an object with a 'templates' list")
    if doc.get("version", REGISTRY_VERSION) != REGISTRY_VERSION:
        raise SchemaError(f"unsupported registry version {doc.get('version')!r}")
    task = doc.get("task")
    return TemplateRegistry([parse_template(raw, task) for raw in doc["templates"]])


def load_template_registry(path: str | os.PathLike[str]) -> TemplateRegistry:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc.msg})") from None
    return parse_registry(doc)


def shipped_registry(name: str) -> TemplateRegistry:
    """Load one of the registries bundled with the package (see ``SHIPPED_REGISTRIES``)."""
    if name not in SHIPPED_REGISTRIES:
        raise UnknownTemplate(f"no shipped registry {name!r}; choose from {SHIPPED_REGISTRIES}")
    text = resources.files("parc.templates").joinpath(f"{name}.json").read_text(encoding="utf-8")
    return parse_registry(json.loads(text))


def all_shipped_templates() -> TemplateRegistry:
    registry = TemplateRegistry()
    for name in SHIPPED_REGISTRIES:
        registry = registry.merge(shipped_registry(name))
    return registry


def prompt_checksum(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()

