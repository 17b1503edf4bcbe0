"""Sentence pool storage and exact top-k cosine retrieval.

Embeddings are kept unit-normalized as little-endian float32 so that the
on-disk cache round-trips bit for bit; scoring always happens in float64.
Retrieval is an exhaustive linear scan. Near-duplicate pool entries are not
collapsed: two identical texts are two candidates.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np
from numpy.typing import ArrayLike

from .errors import (
    ChecksumMismatch,
    DimensionMismatch,
    EmptyPool,
    NonFiniteEmbedding,
    SchemaError,
    ZeroVector,
)

DEFAULT_DIM = 768
NORM_TOLERANCE = 1e-6

CACHE_MAGIC = b"PARCPOOL"
CACHE_VERSION = 1
_HEADER = struct.Struct("<8sIQ")
_DIGEST_SIZE = hashlib.sha256().digest_size


class LabelSource(str, Enum):
    CORPUS = "corpus"
    SELF_PREDICTED = "self_predicted"
    NONE = "none"


def as_vector(values: ArrayLike, dim: int | None = None) -> np.ndarray:
    """Validate ``values`` as a finite 1-D embedding and return it as float64."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionMismatch(f"embedding must be a non-empty 1-D sequence, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise DimensionMismatch(f"expected dim {dim}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise NonFiniteEmbedding("embedding contains NaN or infinite components")
    return v


def normalize(v: ArrayLike) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm.

    Raises:
        ZeroVector: every component is zero.
    """
    arr = as_vector(v)
    norm = float(np.linalg.norm(arr))
    if norm == 0.0:
        raise ZeroVector("cannot normalize an all-zero embedding")
    return arr / norm


def is_normalized(v: ArrayLike, tol: float = NORM_TOLERANCE) -> bool:
    return abs(float(np.linalg.norm(np.asarray(v, dtype=np.float64))) - 1.0) <= tol


def cosine_similarity(a: ArrayLike, b: ArrayLike) -> float:
    """Cosine of the angle between ``a`` and ``b``, clamped to [-1, 1]."""
    va, vb = as_vector(a), as_vector(b)
    if va.shape != vb.shape:
        raise DimensionMismatch(f"dims differ: {va.shape[0]} vs {vb.shape[0]}")
    na, nb = float(np.linalg.norm(va)), float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity is undefined for a zero vector")
    return float(min(1.0, max(-1.0, float(np.dot(va, vb)) / (na * nb))))


def _unit_float32(values: ArrayLike, dim: int) -> np.ndarray:
    unit = normalize(as_vector(values, dim)).astype("<f4")
    unit.flags.writeable = False
    return unit


@dataclass(frozen=True, eq=False)
class PoolEntry:
    """One high-resource-language document of the retrieval pool."""

    id: str
    text: str
    label: str | None = None
    embedding: np.ndarray | None = None
    label_source: LabelSource = LabelSource.NONE

    def __post_init__(self) -> None:
        if not isinstance(self.text, str) or not self.text:
            raise SchemaError(f"pool entry {self.id!r} has empty text")
        object.__setattr__(self, "label_source", LabelSource(self.label_source))
        if self.label_source is not LabelSource.NONE and self.label is None:
            raise SchemaError(f"pool entry {self.id!r} has label_source={self.label_source.value} but no label")
        if self.label_source is LabelSource.NONE and self.label is not None:
            raise SchemaError(f"pool entry {self.id!r} carries a label but label_source=none")

    @property
    def is_labeled(self) -> bool:
        return self.label is not None

    def with_label(self, label: str, source: LabelSource = LabelSource.SELF_PREDICTED) -> PoolEntry:
        return PoolEntry(self.id, self.text, label, self.embedding, source)

    def with_embedding(self, embedding: ArrayLike, dim: int) -> PoolEntry:
        return PoolEntry(self.id, self.text, self.label, _unit_float32(embedding, dim), self.label_source)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PoolEntry):
            return NotImplemented
        if (self.id, self.text, self.label, self.label_source) != (
            other.id,
            other.text,
            other.label,
            other.label_source,
        ):
            return False
        if self.embedding is None or other.embedding is None:
            return self.embedding is None and other.embedding is None
        return self.embedding.dtype == other.embedding.dtype and self.embedding.tobytes() == other.embedding.tobytes()

    __hash__ = None  # type: ignore[assignment]


class SentencePool:
    """Immutable, ordered collection of pool entries sharing one embedding dim.

    Entries without an embedding are kept but are invisible to retrieval.
    """

    def __init__(self, entries: Iterable[PoolEntry], dim: int = DEFAULT_DIM) -> None:
        if dim < 1:
            raise DimensionMismatch(f"dim must be positive, got {dim}")
        self.dim = dim
        self.entries: tuple[PoolEntry, ...] = tuple(entries)
        self._index: dict[str, int] = {}
        for i, entry in enumerate(self.entries):
            if entry.id in self._index:
                raise SchemaError(f"duplicate pool id {entry.id!r}")
            self._index[entry.id] = i
            if entry.embedding is not None and entry.embedding.shape != (dim,):
                raise DimensionMismatch(f"entry {entry.id!r} has dim {entry.embedding.shape[0]}, pool dim is {dim}")

        positions = [i for i, e in enumerate(self.entries) if e.embedding is not None]
        self._positions = np.asarray(positions, dtype=np.int64)
        if positions:
            matrix = np.stack([self.entries[i].embedding for i in positions]).astype("<f4")
        else:
            matrix = np.zeros((0, dim), dtype="<f4")
        matrix.flags.writeable = False
        self._matrix = matrix

    @property
    def size(self) -> int:
        return len(self.entries)

    @property
    def embedded_count(self) -> int:
        return int(self._positions.shape[0])

    @property
    def matrix(self) -> np.ndarray:
        """Read-only (embedded_count, dim) float32 matrix in pool order."""
        return self._matrix

    @property
    def embedded_positions(self) -> np.ndarray:
        return self._positions

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[PoolEntry]:
        return iter(self.entries)

    def __contains__(self, entry_id: object) -> bool:
        return entry_id in self._index

    def get(self, entry_id: str) -> PoolEntry:
        return self.entries[self._index[entry_id]]

    def index_of(self, entry_id: str) -> int:
        return self._index[entry_id]

    def replace(self, entries: Iterable[PoolEntry]) -> SentencePool:
        return SentencePool(entries, self.dim)

    def checksum(self) -> str:
        return hashlib.sha256(_serialize(self)).hexdigest()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SentencePool):
            return NotImplemented
        return self.dim == other.dim and self.entries == other.entries

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"SentencePool(size={self.size}, embedded={self.embedded_count}, dim={self.dim})"


class Hit(NamedTuple):
    entry_id: str
    similarity: float


@dataclass(frozen=True)
class RetrievalResult:
    hits: tuple[Hit, ...]
    k: int
    truncated: bool = False

    @property
    def ids(self) -> list[str]:
        return [h.entry_id for h in self.hits]


EMPTY_RESULT = RetrievalResult(hits=(), k=0)


def retrieve_top_k(query: ArrayLike, pool: SentencePool, k: int) -> RetrievalResult:
    """Return the ``k`` pool entries with the highest cosine to ``query``.

    Ties are broken by ascending pool index. When fewer than ``k`` entries
    are embedded, all of them are returned and the result is flagged
    ``truncated``.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if pool.embedded_count == 0:
        raise EmptyPool("pool has no embedded entries")
    q = normalize(as_vector(query, pool.dim))
    scores = pool.matrix.astype(np.float64) @ q
    np.clip(scores, -1.0, 1.0, out=scores)
    order = np.argsort(-scores, kind="stable")[:k]
    hits = tuple(
        Hit(pool.entries[int(pool.embedded_positions[j])].id, float(scores[j]))
        for j in order
    )
    return RetrievalResult(hits=hits, k=k, truncated=k > pool.embedded_count)


def build_pool(records: Iterable[Mapping[str, Any]], dim: int = DEFAULT_DIM) -> SentencePool:
    """Validate raw pool records into a :class:`SentencePool`.

    Each record needs ``text``; ``id``, ``label`` and ``embedding`` are
    optional. Missing ids become the zero-padded record index.
    """
    entries = []
    for i, rec in enumerate(records):
        if not isinstance(rec, Mapping):
            raise SchemaError("pool record must be an object", line=i + 1)
        text = rec.get("text")
        if not isinstance(text, str) or not text:
            raise SchemaError("missing or empty 'text' field", line=i + 1)
        entry_id = rec.get("id")
        entry_id = f"{i:06d}" if entry_id is None else str(entry_id)
        label = rec.get("label")
        label = None if label is None else str(label)
        source = rec.get("label_source")
        if source is None:
            source = LabelSource.CORPUS if label is not None else LabelSource.NONE
        emb = rec.get("embedding")
        try:
            entry = PoolEntry(entry_id, text, label, None, LabelSource(source))
            if emb is not None:
                entry = entry.with_embedding(emb, dim)
        except DimensionMismatch as exc:
            raise DimensionMismatch(f"line {i + 1}: {exc}") from None
        except (SchemaError, ZeroVector, NonFiniteEmbedding):
            raise
        except ValueError as exc:
            raise SchemaError(str(exc), line=i + 1) from None
        entries.append(entry)
    return SentencePool(entries, dim)


def read_jsonl(path: str | os.PathLike[str]) -> list[dict[str, Any]]:
    """Parse a line-delimited JSON file, skipping blank lines."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", line=lineno) from None
            if not isinstance(rec, dict):
                raise SchemaError("record must be a JSON object", line=lineno)
            rec["_line"] = lineno
            records.append(rec)
    return records


def load_pool_records(path: str | os.PathLike[str], dim: int = DEFAULT_DIM) -> SentencePool:
    records = read_jsonl(path)
    try:
        return build_pool(records, dim)
    except SchemaError as exc:
        # build_pool counts records; map back to physical lines for the message
        if exc.line is not None and exc.line <= len(records):
            raise SchemaError(str(exc).split(": ", 1)[-1], line=records[exc.line - 1]["_line"]) from None
        raise


def _serialize(pool: SentencePool) -> bytes:
    header = {
        "dim": pool.dim,
        "count": pool.size,
        "entries": [
            {
                "id": e.id,
                "text": e.text,
                "label": e.label,
                "label_source": e.label_source.value,
                "embedded": e.embedding is not None,
            }
            for e in pool.entries
        ],
    }
    header_bytes = json.dumps(header, ensure_ascii=False, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = np.ascontiguousarray(pool.matrix, dtype="<f4").tobytes()
    return _HEADER.pack(CACHE_MAGIC, CACHE_VERSION, len(header_bytes)) + header_bytes + body


def save_pool(pool: SentencePool, path: str | os.PathLike[str]) -> Path:
    """Write ``pool`` to a checksummed binary cache file (atomic replace)."""
    path = Path(path)
    payload = _serialize(pool)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.write(hashlib.sha256(payload).digest())
    os.replace(tmp, path)
    return path


def load_pool(path: str | os.PathLike[str]) -> SentencePool:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + _DIGEST_SIZE:
        raise SchemaError(f"{path}: file too short for a pool cache")
    payload, digest = raw[:-_DIGEST_SIZE], raw[-_DIGEST_SIZE:]
    magic, version, header_len = _HEADER.unpack_from(payload)
    if magic != CACHE_MAGIC:
        raise SchemaError(f"{path}: not a pool cache file")
    if version != CACHE_VERSION:
        raise SchemaError(f"{path}: unsupported pool cache version {version}")
    if hashlib.sha256(payload).digest() != digest:
        raise ChecksumMismatch(f"{path}: checksum mismatch")
    try:
        header = json.loads(payload[_HEADER.size : _HEADER.size + header_len].decode("utf-8"))
        dim, count, metas = int(header["dim"]), int(header["count"]), header["entries"]
    except (ValueError, KeyError, TypeError) as exc:
        raise SchemaError(f"{path}: corrupt header ({exc})") from None
    if len(metas) != count:
        raise SchemaError(f"{path}: header count {count} != {len(metas)} entries")
    n_embedded = sum(1 for m in metas if m["embedded"])
    body = payload[_HEADER.size + header_len :]
    if len(body) != n_embedded * dim * 4:
        raise SchemaError(f"{path}: embedding block has {len(body)} bytes, expected {n_embedded * dim * 4}")
    matrix = np.frombuffer(body, dtype="<f4").reshape(n_embedded, dim)

    entries = []
    row = 0
    for m in metas:
        emb = None
        if m["embedded"]:
            emb = matrix[row].copy()
            emb.flags.writeable = False
            row += 1
        entries.append(PoolEntry(m["id"], m["text"], m["label"], emb, LabelSource(m["label_source"])))
    return SentencePool(entries, dim)
