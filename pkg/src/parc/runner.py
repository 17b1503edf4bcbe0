"""Config-driven experiment orchestration.

A run walks every (template, k) cell of the config in order. Within a cell,
examples may be processed concurrently, but results are merged by example
index, so the manifest bytes never depend on scheduling. Manifests carry no
wall-clock data; timings go to a ``.meta.json`` sidecar.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import gateway
from .errors import (
    CellError,
    ConstraintViolation,
    ParcError,
    SchemaError,
    TransportError,
)
from .gateway import (
    BackendDescriptor,
    BackendKind,
    LabelOptionSet,
    ParseStatus,
    Prediction,
)
from .metrics import (
    ClassificationReport,
    RougeScores,
    classification_report,
    confusion_matrix,
    f1_delta,
    lead_n,
    mean_rouge,
    rouge_scores,
)
from .prompts import (
    PromptTemplate,
    QueryExample,
    TemplateRegistry,
    TemplateStyle,
    all_shipped_templates,
    assemble_prompt,
    load_template_registry,
    prompt_checksum,
)
from .vector_store import (
    EMPTY_RESULT,
    SentencePool,
    load_pool,
    load_pool_records,
    read_jsonl,
    retrieve_top_k,
    save_pool,
)

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
EMBED_BATCH = 32
ENV_PREFIX = "PARC_"


class Task(str, Enum):
    CLASSIFICATION = "classification"
    SUMMARIZATION = "summarization"


class _Strict(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class Limits(_Strict):
    max_examples: int | None = Field(None, ge=1)
    max_prompt_chars: int | None = Field(None, ge=1)
    parallelism: int = Field(1, ge=1)


class Backends(_Strict):
    generation: BackendDescriptor | None = None
    fill_mask: BackendDescriptor | None = None
    embedding: BackendDescriptor | None = None


class SelfPredict(_Strict):
    template_id: str
    fallback_label: str | None = None


class ExperimentConfig(_Strict):
    task: Task
    dataset_path: str
    pool_path: str | None = None
    template_ids: tuple[str, ...] = Field(min_length=1)
    template_registry: str | None = None
    k_values: tuple[int, ...] = (0,)
    backends: Backends = Backends()
    label_options: dict[str, tuple[str, ...]] | None = None
    fallback_label: str | None = None
    target_lang: str | None = None
    self_predict: SelfPredict | None = None
    limits: Limits = Limits()
    seed: int = 0
    output_dir: str = "runs"
    cache_dir: str | None = None
    f1_average: str = "macro"

    @field_validator("k_values")
    @classmethod
    def _k_nonneg(cls, v: tuple[int, ...]) -> tuple[int, ...]:
        if not v:
            raise ValueError("k_values must not be empty")
        if any(k < 0 for k in v):
            raise ValueError("k values must be >= 0")
        return v

    @field_validator("label_options", mode="before")
    @classmethod
    def _labels_as_mapping(cls, v: Any) -> Any:
        if isinstance(v, list):
            return {str(lbl): [] for lbl in v}
        if isinstance(v, Mapping):
            return {str(k): [s] if isinstance(s, str) else (s or []) for k, s in v.items()}
        return v

    @field_validator("f1_average")
    @classmethod
    def _known_average(cls, v: str) -> str:
        if v not in ("macro", "weighted", "accuracy"):
            raise ValueError("f1_average must be macro, weighted or accuracy")
        return v

    @property
    def option_set(self) -> LabelOptionSet | None:
        if self.label_options is None:
            return None
        return LabelOptionSet(tuple(self.label_options.items()))

    @property
    def labels(self) -> list[str]:
        return list(self.label_options or ())

    @property
    def task_meta(self) -> dict[str, Any]:
        return {"target_lang": self.target_lang} if self.target_lang is not None else {}

    @property
    def cache_path(self) -> Path:
        return Path(self.cache_dir) if self.cache_dir else Path(self.output_dir) / "cache"

    def config_hash(self) -> str:
        doc = self.model_dump(mode="json", exclude={"output_dir", "cache_dir"})
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode("utf-8")).hexdigest()

    def to_dict(self) -> dict[str, Any]:
        return self.model_dump(mode="json", exclude_none=True)

    def registry(self) -> TemplateRegistry:
        reg = all_shipped_templates()
        if self.template_registry:
            reg = reg.merge(load_template_registry(self.template_registry))
        return reg

    def check_constraints(self) -> None:
        """Cross-field rules; raises :class:`ConstraintViolation`."""
        if any(k > 0 for k in self.k_values):
            if not self.pool_path:
                raise ConstraintViolation("k > 0 needs pool_path")
            if self.backends.embedding is None:
                raise ConstraintViolation("k > 0 needs an embedding backend")
        if self.task is Task.CLASSIFICATION and not self.label_options:
            raise ConstraintViolation("classification needs label_options")
        if self.task is Task.SUMMARIZATION and not self.target_lang:
            raise ConstraintViolation("summarization needs target_lang")
        if self.fallback_label is not None and self.fallback_label not in self.labels:
            raise ConstraintViolation(f"fallback_label {self.fallback_label!r} is not a task label")
        if self.self_predict is not None and not self.pool_path:
            raise ConstraintViolation("self_predict needs pool_path")
        for name in ("generation", "fill_mask", "embedding"):
            desc = getattr(self.backends, name)
            if desc is not None and desc.kind.value != name:
                raise ConstraintViolation(f"backends.{name} has kind {desc.kind.value}")
        try:
            reg = self.registry()
            templates = [reg[t] for t in self.template_ids]
            if self.self_predict is not None:
                templates.append(reg[self.self_predict.template_id])
        except ParcError as exc:
            raise ConstraintViolation(str(exc)) from None
        for t in templates:
            if t.style is TemplateStyle.MASKED:
                if self.task is Task.SUMMARIZATION:
                    raise ConstraintViolation(f"masked template {t.id!r} cannot summarize")
                if self.backends.fill_mask is None:
                    raise ConstraintViolation(f"masked template {t.id!r} needs a fill_mask backend")
                if t.verbalizer is None or not t.verbalizer.covers(self.labels):
                    raise ConstraintViolation(f"verbalizer of {t.id!r} does not cover labels {self.labels}")
            elif self.backends.generation is None:
                raise ConstraintViolation(f"generative template {t.id!r} needs a generation backend")
            if t.requires_target_lang and not self.target_lang:
                raise ConstraintViolation(f"template {t.id!r} needs target_lang")


def _set_dotted(doc: dict[str, Any], dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = doc
    for key in keys[:-1]:
        nxt = node.get(key)
        if nxt is None:
            nxt = node[key] = {}
        if not isinstance(nxt, dict):
            raise SchemaError(f"cannot set {dotted!r}: {key!r} is not a mapping")
        node = nxt
    node[keys[-1]] = value


def apply_overrides(doc: dict[str, Any], overrides: Iterable[str]) -> dict[str, Any]:
    """Apply ``key.path=value`` strings; values are parsed as YAML scalars/lists."""
    for item in overrides:
        if "=" not in item:
            raise SchemaError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        _set_dotted(doc, key.strip(), yaml.safe_load(raw))
    return doc


def apply_env(doc: dict[str, Any], environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    """``PARC_<KIND>_ENDPOINT`` / ``PARC_<KIND>_TIMEOUT`` override configured backends."""
    environ = os.environ if environ is None else environ
    backends = doc.get("backends") or {}
    for kind in BackendKind:
        section = backends.get(kind.value)
        if not isinstance(section, dict):
            continue
        prefix = f"{ENV_PREFIX}{kind.value.upper()}_"
        if prefix + "ENDPOINT" in environ:
            section["endpoint"] = environ[prefix + "ENDPOINT"]
        if prefix + "TIMEOUT" in environ:
            section["timeout"] = float(environ[prefix + "TIMEOUT"])
    return doc


def parse_config(doc: Mapping[str, Any], base_dir: str | os.PathLike[str] | None = None) -> ExperimentConfig:
    if not isinstance(doc, Mapping):
        raise SchemaError("config must be a mapping")
    doc = json.loads(json.dumps(doc))
    for kind, section in (doc.get("backends") or {}).items():
        if isinstance(section, dict):
            section.setdefault("kind", kind)
    if base_dir is not None:
        for key in ("dataset_path", "pool_path", "template_registry", "output_dir", "cache_dir"):
            if isinstance(doc.get(key), str) and not os.path.isabs(doc[key]):
                doc[key] = os.path.normpath(os.path.join(base_dir, doc[key]))
    try:
        config = ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        raise SchemaError(f"invalid config: {exc}") from None
    config.check_constraints()
    return config


def load_config(
    path: str | os.PathLike[str],
    overrides: Iterable[str] = (),
    environ: Mapping[str, str] | None = None,
) -> ExperimentConfig:
    """Read a YAML/JSON config; env vars, then ``overrides``, take precedence."""
    with open(path, encoding="utf-8") as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise SchemaError(f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: config must be a mapping")
    apply_env(doc, environ)
    apply_overrides(doc, overrides)
    return parse_config(doc, Path(path).parent)


def dump_config(config: ExperimentConfig, path: str | os.PathLike[str]) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(config.to_dict(), sort_keys=False, allow_unicode=True), encoding="utf-8")
    return path


def load_dataset(path: str | os.PathLike[str], task: Task | str, max_examples: int | None = None) -> list[QueryExample]:
    task = Task(task)
    examples = []
    for i, rec in enumerate(read_jsonl(path)):
        line = rec["_line"]
        text = rec.get("text")
        if not isinstance(text, str) or not text:
            raise SchemaError("missing or empty 'text'", line=line)
        gold = summary = None
        if task is Task.CLASSIFICATION:
            if rec.get("label") is None:
                raise SchemaError("missing 'label'", line=line)
            gold = str(rec["label"])
        else:
            summary = rec.get("summary")
            if not isinstance(summary, str) or not summary:
                raise SchemaError("missing or empty 'summary'", line=line)
        emb = rec.get("embedding")
        if emb is not None:
            try:
                emb = tuple(float(x) for x in emb)
            except (TypeError, ValueError):
                raise SchemaError("'embedding' must be a list of numbers", line=line) from None
        example_id = str(rec["id"]) if rec.get("id") is not None else f"{i:06d}"
        examples.append(QueryExample(text, example_id, gold, summary, emb))
    if max_examples is not None:
        examples = examples[:max_examples]
    return examples


def file_checksum(path: str | os.PathLike[str]) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class EmbeddingCache:
    """Raw backend vectors keyed by (backend identity, text checksum).

    Vectors are stored as float64 exactly as the backend returned them, so a
    warm cache yields the same downstream bytes as a cold one.
    """

    def __init__(self, directory: str | os.PathLike[str] | None, descriptor: BackendDescriptor) -> None:
        self.descriptor = descriptor
        self.path = None if directory is None else Path(directory) / f"emb-{descriptor.cache_key()[:24]}.npz"
        self._vectors: dict[str, np.ndarray] = {}
        self._dirty = False
        self.hits = self.misses = 0
        if self.path is not None and self.path.exists():
            with np.load(self.path) as data:
                self._vectors = {k: data[k] for k in data.files}

    @staticmethod
    def key(text: str) -> str:
        return "t" + hashlib.sha256(text.encode("utf-8")).hexdigest()

    def lookup(self, texts: Sequence[str]) -> list[np.ndarray | None]:
        return [self._vectors.get(self.key(t)) for t in texts]

    def get_many(self, texts: Sequence[str], allow_backend: bool = True) -> list[np.ndarray]:
        found = self.lookup(texts)
        missing = sorted({t for t, v in zip(texts, found) if v is None})
        self.hits += len(texts) - sum(v is None for v in found)
        if missing:
            if not allow_backend:
                raise ConstraintViolation(f"{len(missing)} texts have no cached embedding and backends are disabled")
            self.misses += len(missing)
            for start in range(0, len(missing), EMBED_BATCH):
                batch = missing[start : start + EMBED_BATCH]
                for text, vec in zip(batch, gateway.embed(self.descriptor, batch)):
                    self._vectors[self.key(text)] = np.asarray(vec, dtype=np.float64)
            self._dirty = True
        return [self._vectors[self.key(t)] for t in texts]

    def flush(self) -> None:
        if self.path is None or not self._dirty:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_name(self.path.stem + ".tmp.npz")
        np.savez(tmp, **self._vectors)
        os.replace(tmp, self.path)
        self._dirty = False


# ---------------------------------------------------------------- manifest


@dataclass
class ExampleRecord:
    index: int
    example_id: str
    prompt_sha256: str
    prompt_chars: int
    demo_count: int
    retrieved: list[list[Any]] = field(default_factory=list)
    retrieval_truncated: bool = False
    prompt_truncated: bool = False
    raw_output: Any = None
    mapped_label: str | None = None
    parse_status: str | None = None
    summary: str | None = None
    error: str | None = None
    prompt: str | None = None


@dataclass
class CellResult:
    template_id: str
    k: int
    records: list[ExampleRecord] = field(default_factory=list)
    report: dict[str, Any] | None = None
    metadata: dict[str, Any] = field(default_factory=dict)
    failed: bool = False
    error: str | None = None

    @property
    def incomplete(self) -> bool:
        return self.failed or any(r.error is not None for r in self.records)


@dataclass
class RunManifest:
    config_hash: str
    task: str
    dataset_checksum: str
    pool_checksum: str | None
    cells: list[CellResult] = field(default_factory=list)
    baselines: dict[str, Any] = field(default_factory=dict)
    incomplete: bool = False
    dry_run: bool = False
    version: int = MANIFEST_VERSION

    def cell(self, template_id: str, k: int) -> CellResult:
        for c in self.cells:
            if c.template_id == template_id and c.k == k:
                return c
        raise KeyError((template_id, k))

    def classification_report(self, template_id: str, k: int) -> ClassificationReport:
        report = self.cell(template_id, k).report
        if report is None:
            raise KeyError(f"cell ({template_id}, {k}) has no report")
        return ClassificationReport.from_dict(report)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> RunManifest:
        try:
            if d.get("version") != MANIFEST_VERSION:
                raise SchemaError(f"unsupported manifest version {d.get('version')!r}")
            cells = [
                CellResult(**{**c, "records": [ExampleRecord(**r) for r in c["records"]]}) for c in d["cells"]
            ]
            return cls(**{**d, "cells": cells})
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed manifest: {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def manifest_filename(config_hash: str, dry_run: bool = False) -> str:
    return f"manifest-{config_hash[:16]}{'-dry' if dry_run else ''}.json"


def write_report(manifest: RunManifest, directory: str | os.PathLike[str]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / manifest_filename(manifest.config_hash, manifest.dry_run)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(manifest.to_json(), encoding="utf-8")
    os.replace(tmp, path)
    return path


def read_report(path: str | os.PathLike[str]) -> RunManifest:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc.msg})") from None
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: manifest must be an object")
    return RunManifest.from_dict(doc)


def _write_meta(path: Path, meta: Mapping[str, Any]) -> None:
    meta_path = path.with_name(path.name.replace("manifest-", "meta-", 1))
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _raw_to_json(raw: Any) -> Any:
    if isinstance(raw, list):
        return [[c.word, None if c.flagged else c.score, c.flagged] for c in raw]
    return raw


# ---------------------------------------------------------------- pipeline


@dataclass
class RunContext:
    """Resolved inputs for a run: templates, data, pool, query embeddings."""

    config: ExperimentConfig
    registry: TemplateRegistry
    examples: list[QueryExample]
    pool: SentencePool | None
    query_vectors: list[np.ndarray] | None
    dataset_checksum: str
    stats: dict[str, Any] = field(default_factory=dict)


def _embedding_cache(config: ExperimentConfig) -> EmbeddingCache | None:
    desc = config.backends.embedding
    return None if desc is None else EmbeddingCache(config.cache_path, desc)


def embed_pool(pool: SentencePool, cache: EmbeddingCache, allow_backend: bool = True) -> SentencePool:
    """Fill in embeddings for every pool entry that lacks one."""
    todo = [e for e in pool.entries if e.embedding is None]
    if not todo:
        return pool
    vectors = dict(zip((e.id for e in todo), cache.get_many([e.text for e in todo], allow_backend)))
    return pool.replace(e.with_embedding(vectors[e.id], pool.dim) if e.id in vectors else e for e in pool.entries)


def load_any_pool(path: str | os.PathLike[str], dim: int) -> SentencePool:
    if str(path).endswith((".jsonl", ".json")):
        return load_pool_records(path, dim)
    return load_pool(path)


def prepare_pool(
    config: ExperimentConfig,
    cache: EmbeddingCache | None = None,
    allow_backend: bool = True,
    registry: TemplateRegistry | None = None,
) -> SentencePool | None:
    """Load, embed and (optionally) self-label the configured pool.

    Self-predicted pools are cached per (pool, backend, template, labels)
    so the model pass runs once.
    """
    if not config.pool_path:
        return None
    dim = config.backends.embedding.embedding_dim if config.backends.embedding else 768
    pool = load_any_pool(config.pool_path, dim)
    if cache is not None:
        pool = embed_pool(pool, cache, allow_backend)
    sp = config.self_predict
    if sp is None or all(e.label is not None for e in pool.entries):
        return pool

    registry = registry or config.registry()
    template = registry[sp.template_id]
    desc = config.backends.fill_mask if template.style is TemplateStyle.MASKED else config.backends.generation
    assert desc is not None and config.option_set is not None
    key_src = json.dumps(
        [pool.checksum(), desc.cache_key(), template.to_dict(), config.option_set.to_dict(), sp.fallback_label, config.task_meta],
        sort_keys=True,
    )
    cached = config.cache_path / f"pool-selfpred-{hashlib.sha256(key_src.encode()).hexdigest()[:24]}.parcpool"
    if cached.exists():
        log.info("using self-predicted pool cache %s", cached)
        return load_pool(cached)
    if not allow_backend:
        raise ConstraintViolation("self-prediction needs a backend call but backends are disabled")
    labeled = gateway.self_predict_labels(
        pool, desc, template, config.option_set, sp.fallback_label, config.task_meta, config.limits.parallelism
    )
    cached.parent.mkdir(parents=True, exist_ok=True)
    save_pool(labeled, cached)
    return labeled


def build_context(config: ExperimentConfig, dry_run: bool = False) -> RunContext:
    registry = config.registry()
    examples = load_dataset(config.dataset_path, config.task, config.limits.max_examples)
    cache = _embedding_cache(config)
    pool = query_vectors = None
    stats: dict[str, Any] = {}
    if any(k > 0 for k in config.k_values):
        assert cache is not None
        pool = prepare_pool(config, cache, allow_backend=not dry_run, registry=registry)
        need = [q.text for q in examples if q.embedding is None]
        fetched = iter(cache.get_many(need, allow_backend=not dry_run)) if need else iter(())
        query_vectors = [
            np.asarray(q.embedding, dtype=np.float64) if q.embedding is not None else next(fetched) for q in examples
        ]
        cache.flush()
        stats = {"embedding_cache_hits": cache.hits, "embedding_cache_misses": cache.misses}
    return RunContext(config, registry, examples, pool, query_vectors, file_checksum(config.dataset_path), stats)


def _cell_metadata(config: ExperimentConfig, template: PromptTemplate, k: int, pool: SentencePool | None) -> dict[str, Any]:
    desc = config.backends.fill_mask if template.style is TemplateStyle.MASKED else config.backends.generation
    return {
        "template_id": template.id,
        "k": k,
        "backend": None if desc is None else desc.model_dump(mode="json"),
        "pool_checksum": None if pool is None or k == 0 else pool.checksum(),
        "seed": config.seed,
    }


def _process_example(
    ctx: RunContext, template: PromptTemplate, k: int, index: int, dry_run: bool
) -> tuple[ExampleRecord, Prediction | None]:
    config, q = ctx.config, ctx.examples[index]
    if k > 0:
        assert ctx.pool is not None and ctx.query_vectors is not None
        hits = retrieve_top_k(ctx.query_vectors[index], ctx.pool, k)
    else:
        hits = EMPTY_RESULT
    prompt = assemble_prompt(
        q, hits, ctx.pool, template, task_meta=config.task_meta, max_chars=config.limits.max_prompt_chars
    )
    record = ExampleRecord(
        index=index,
        example_id=q.id,
        prompt_sha256=prompt_checksum(prompt.full_text),
        prompt_chars=len(prompt.full_text),
        demo_count=prompt.demo_count,
        retrieved=[[h.entry_id, h.similarity] for h in hits.hits],
        retrieval_truncated=hits.truncated,
        prompt_truncated=prompt.truncated,
    )
    if dry_run:
        record.prompt = prompt.full_text
        return record, None

    if config.task is Task.SUMMARIZATION:
        assert config.backends.generation is not None
        try:
            record.summary = record.raw_output = gateway.generate(config.backends.generation, prompt.full_text)
        except TransportError as exc:
            record.error = str(exc)
        return record, None

    assert config.option_set is not None
    desc = config.backends.fill_mask if template.style is TemplateStyle.MASKED else config.backends.generation
    try:
        pred = gateway.predict(desc, prompt.full_text, template, config.option_set, config.fallback_label)
    except TransportError as exc:
        pred = Prediction.failed(str(exc))
    record.raw_output = _raw_to_json(pred.raw_output)
    record.mapped_label = pred.mapped_label
    record.parse_status = pred.parse_status.value
    record.error = pred.error
    return record, pred


def _score_cell(ctx: RunContext, cell: CellResult) -> None:
    config = ctx.config
    if config.task is Task.CLASSIFICATION:
        gold = [q.gold_label for q in ctx.examples]
        preds = [r.mapped_label if r.parse_status != ParseStatus.UNPARSED.value else None for r in cell.records]
        cm = confusion_matrix(gold, preds, config.labels)
        cell.report = {**classification_report(cm).to_dict(), "confusion_matrix": cm.to_dict()}
    else:
        scores = [rouge_scores(r.summary or "", q.reference_summary or "") for r, q in zip(cell.records, ctx.examples)]
        cell.report = mean_rouge(scores).to_dict()


def run_cell(ctx: RunContext, template_id: str, k: int, dry_run: bool = False) -> CellResult:
    """Retrieve, prompt, predict and score every example for one cell.

    Transport failures become unparsed records; any other module error is
    raised as :class:`CellError` naming the cell and example.
    """
    template = ctx.registry[template_id]
    cell = CellResult(template_id, k, metadata=_cell_metadata(ctx.config, template, k, ctx.pool))

    def work(index: int) -> ExampleRecord:
        try:
            return _process_example(ctx, template, k, index, dry_run)[0]
        except ParcError as exc:
            raise CellError(exc, template_id=template_id, k=k, example_id=ctx.examples[index].id) from exc

    with ThreadPoolExecutor(max_workers=ctx.config.limits.parallelism) as ex:
        records = list(ex.map(work, range(len(ctx.examples))))
    cell.records = sorted(records, key=lambda r: r.index)
    if not dry_run:
        try:
            _score_cell(ctx, cell)
        except ParcError as exc:
            raise CellError(exc, template_id=template_id, k=k) from exc
    return cell


def _lead_baseline(examples: Sequence[QueryExample], n: int = 64) -> dict[str, Any]:
    scores = [rouge_scores(lead_n(q.text, n), q.reference_summary or "") for q in examples]
    return mean_rouge(scores).to_dict()


def _finish(manifest: RunManifest, config: ExperimentConfig, started: float, stats: Mapping[str, Any]) -> Path:
    manifest.incomplete = manifest.incomplete or any(c.incomplete for c in manifest.cells)
    path = write_report(manifest, config.output_dir)
    _write_meta(
        path,
        {
            "finished_at": datetime.now(timezone.utc).isoformat(),
            "elapsed_seconds": round(time.monotonic() - started, 3),
            "config_hash": manifest.config_hash,
            **stats,
        },
    )
    return path


def run_experiment(
    config: ExperimentConfig,
    dry_run: bool = False,
    keep_going: bool = False,
    on_cell: Callable[[CellResult], None] | None = None,
) -> RunManifest:
    """Run every (template, k) cell and persist the manifest.

    With ``keep_going`` a failing cell is recorded (``failed=True``) and the
    run continues; otherwise the partial manifest is written with
    ``incomplete`` set and the :class:`CellError` is re-raised.
    """
    started = time.monotonic()
    ctx = build_context(config, dry_run)
    manifest = RunManifest(
        config_hash=config.config_hash(),
        task=config.task.value,
        dataset_checksum=ctx.dataset_checksum,
        pool_checksum=None if ctx.pool is None else ctx.pool.checksum(),
        dry_run=dry_run,
    )
    if config.task is Task.SUMMARIZATION:
        manifest.baselines["lead-64"] = _lead_baseline(ctx.examples)

    for template_id in config.template_ids:
        for k in config.k_values:
            try:
                cell = run_cell(ctx, template_id, k, dry_run)
            except CellError as exc:
                if not keep_going:
                    manifest.incomplete = True
                    _finish(manifest, config, started, ctx.stats)
                    raise
                log.warning("cell failed: %s", exc)
                cell = CellResult(template_id, k, failed=True, error=str(exc))
            manifest.cells.append(cell)
            if on_cell is not None:
                on_cell(cell)
    _finish(manifest, config, started, ctx.stats)
    return manifest


def run_classification(config: ExperimentConfig, dry_run: bool = False) -> RunManifest:
    if config.task is not Task.CLASSIFICATION:
        raise ConstraintViolation("run_classification needs task=classification")
    return run_experiment(config, dry_run)


def run_summarization(config: ExperimentConfig, dry_run: bool = False) -> RunManifest:
    if config.task is not Task.SUMMARIZATION:
        raise ConstraintViolation("run_summarization needs task=summarization")
    return run_experiment(config, dry_run)


# ---------------------------------------------------------------- sweeps


@dataclass(frozen=True)
class DeltaRow:
    template_id: str
    k: int
    zero_shot: float
    value: float
    delta: float


@dataclass
class SweepSummary:
    metric: str
    anchors: dict[str, float]
    rows: list[DeltaRow]
    failed_cells: list[tuple[str, int]]

    def to_dict(self) -> dict[str, Any]:
        return {
            "metric": self.metric,
            "anchors": self.anchors,
            "rows": [{**asdict(r), "delta_display": f"{r.delta:+.2f}"} for r in self.rows],
            "failed_cells": [list(c) for c in self.failed_cells],
        }


def cell_score(cell: CellResult, task: str, average: str = "macro") -> float:
    assert cell.report is not None
    if task == Task.CLASSIFICATION.value:
        return ClassificationReport.from_dict(cell.report).f1(average)
    return RougeScores.from_dict(cell.report).r1.f1


def delta_table(manifest: RunManifest, average: str = "macro") -> SweepSummary:
    """Per-template zero-shot anchor and the k>0 deltas against it.

    Failed cells are skipped with a warning; templates without a usable
    k=0 cell contribute no rows.
    """
    metric = f"{average}_f1" if manifest.task == Task.CLASSIFICATION.value else "rouge1_f1"
    anchors: dict[str, float] = {}
    failed = [(c.template_id, c.k) for c in manifest.cells if c.failed or c.report is None]
    for tid, k in failed:
        log.warning("excluding failed cell template=%s k=%d from deltas", tid, k)
    usable = [c for c in manifest.cells if not c.failed and c.report is not None]
    for c in usable:
        if c.k == 0:
            anchors[c.template_id] = cell_score(c, manifest.task, average)
    rows = []
    for c in usable:
        if c.k == 0:
            continue
        if c.template_id not in anchors:
            log.warning("template %s has no zero-shot anchor; skipping k=%d", c.template_id, c.k)
            continue
        value = cell_score(c, manifest.task, average)
        base = anchors[c.template_id]
        rows.append(DeltaRow(c.template_id, c.k, base, value, f1_delta(value, base)))
    return SweepSummary(metric, anchors, rows, failed)


def sweep(config: ExperimentConfig) -> tuple[RunManifest, SweepSummary]:
    manifest = run_experiment(config, keep_going=True)
    summary = delta_table(manifest, config.f1_average)
    out = Path(config.output_dir) / f"sweep-{manifest.config_hash[:16]}.json"
    out.write_text(json.dumps(summary.to_dict(), indent=2) + "\n", encoding="utf-8")
    return manifest, summary


def format_manifest(manifest: RunManifest) -> str:
    """Render a manifest as plain-text tables with two-decimal scores."""
    lines = [f"task: {manifest.task}   config: {manifest.config_hash[:16]}" + ("   [INCOMPLETE]" if manifest.incomplete else "")]
    if manifest.task == Task.CLASSIFICATION.value:
        header = f"{'template':<24}{'k':>3}  {'acc':>5}  {'macro p/r/f1':>16}  {'weighted p/r/f1':>16}  {'unparsed':>8}"
        lines += [header, "-" * len(header)]
        for c in manifest.cells:
            if c.report is None:
                lines.append(f"{c.template_id:<24}{c.k:>3}  {'failed' if c.failed else 'no report'}")
                continue
            r = ClassificationReport.from_dict(c.report)
            m, w = r.macro_avg, r.weighted_avg
            lines.append(
                f"{c.template_id:<24}{c.k:>3}  {r.accuracy:>5.2f}  "
                f"{m.precision:>4.2f}/{m.recall:.2f}/{m.f1:.2f}  {w.precision:>4.2f}/{w.recall:.2f}/{w.f1:.2f}  {r.unparsed:>8}"
            )
    else:
        header = f"{'system':<28}{'R-1':>7}{'R-2':>7}{'R-L':>7}{'R-LSum':>8}"
        lines += [header, "-" * len(header)]
        rows: list[tuple[str, dict[str, Any]]] = [(name, rep) for name, rep in manifest.baselines.items()]
        rows += [(f"{c.template_id} k={c.k}", c.report) for c in manifest.cells if c.report is not None]
        for name, rep in rows:
            s = RougeScores.from_dict(rep)
            lines.append(f"{name:<28}{100 * s.r1.f1:>7.2f}{100 * s.r2.f1:>7.2f}{100 * s.rl.f1:>7.2f}{100 * s.rlsum.f1:>8.2f}")
    return "\n".join(lines)
