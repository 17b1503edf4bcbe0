from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import brute_force_top_k

from parc.errors import (
    ChecksumMismatch,
    DimensionMismatch,
    EmptyPool,
    NonFiniteEmbedding,
    SchemaError,
    ZeroVector,
)
from parc.vector_store import (
    CACHE_MAGIC,
    LabelSource,
    PoolEntry,
    SentencePool,
    build_pool,
    cosine_similarity,
    is_normalized,
    load_pool,
    load_pool_records,
    normalize,
    retrieve_top_k,
    save_pool,
)


def random_pool(rng: np.random.Generator, size: int, dim: int, labeled: bool = True) -> SentencePool:
    records = [
        {
            "id": f"e{i:04d}",
            "text": f"entry {i}",
            "label": ["a", "b", "c"][i % 3] if labeled else None,
            "embedding": rng.standard_normal(dim),
        }
        for i in range(size)
    ]
    return build_pool(records, dim)


def test_normalize_examples():
    assert np.allclose(normalize([3, 4]), [0.6, 0.8], atol=1e-12)
    assert normalize([1, 0, 0]).tolist() == [1.0, 0.0, 0.0]
    with pytest.raises(ZeroVector):
        normalize([0, 0])
    with pytest.raises(NonFiniteEmbedding):
        normalize([1.0, math.nan])


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=32).filter(lambda v: any(abs(x) > 1e-6 for x in v)))
def test_normalize_yields_unit_norm(values):
    assert is_normalized(normalize(values))


def test_cosine_examples():
    assert cosine_similarity([1, 0], [1, 0]) == 1.0
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert abs(cosine_similarity([1, 0], [1, 1]) - 0.70710678) <= 1e-6
    assert cosine_similarity([1, 2, 3], [-1, -2, -3]) == -1.0
    with pytest.raises(DimensionMismatch):
        cosine_similarity([1, 0], [1, 0, 0])
    with pytest.raises(ZeroVector):
        cosine_similarity([0, 0], [1, 0])


def test_retrieve_self_hit_and_exhaustive():
    rng = np.random.default_rng(0)
    pool = random_pool(rng, 20, 8)
    hit = retrieve_top_k(pool.entries[7].embedding, pool, 1)
    assert hit.ids == [pool.entries[7].id]
    assert abs(hit.hits[0].similarity - 1.0) <= 1e-6

    everything = retrieve_top_k(rng.standard_normal(8), pool, pool.size)
    sims = [h.similarity for h in everything.hits]
    assert sorted(everything.ids) == sorted(e.id for e in pool.entries)
    assert sims == sorted(sims, reverse=True)
    assert not everything.truncated


def test_retrieve_matches_oracle_20_by_8():
    rng = np.random.default_rng(11)
    pool = random_pool(rng, 20, 8)
    stored = [e.embedding.astype(np.float64).tolist() for e in pool.entries]
    for _ in range(50):
        q = rng.standard_normal(8)
        want = [pool.entries[i].id for i in brute_force_top_k(stored, q.tolist(), 3)]
        assert retrieve_top_k(q, pool, 3).ids == want


def test_retrieve_prefix_monotone():
    rng = np.random.default_rng(5)
    pool = random_pool(rng, 100, 16)
    q = rng.standard_normal(16)
    full = retrieve_top_k(q, pool, 100).ids
    for k in (1, 3, 10, 50):
        assert retrieve_top_k(q, pool, k).ids == full[:k]


def test_retrieve_ties_prefer_lower_index():
    pool = build_pool([{"id": c, "text": c, "embedding": [1.0, 0.0]} for c in "dcba"], 2)
    assert retrieve_top_k([1.0, 0.0], pool, 3).ids == ["d", "c", "b"]


def test_retrieve_truncated_and_skips_unembedded():
    pool = build_pool(
        [
            {"id": "x", "text": "x", "embedding": [1.0, 0.0]},
            {"id": "y", "text": "y"},
            {"id": "z", "text": "z", "embedding": [0.0, 1.0]},
        ],
        2,
    )
    r = retrieve_top_k([1.0, 0.2], pool, 3)
    assert r.ids == ["x", "z"] and r.truncated and r.k == 3


def test_retrieve_errors():
    pool = build_pool([{"text": "no vector"}], 4)
    with pytest.raises(EmptyPool):
        retrieve_top_k([1, 0, 0, 0], pool, 1)
    pool = random_pool(np.random.default_rng(0), 5, 4)
    with pytest.raises(DimensionMismatch):
        retrieve_top_k([1, 0, 0], pool, 1)
    with pytest.raises(ValueError):
        retrieve_top_k([1, 0, 0, 0], pool, 0)


def test_build_pool_basics():
    pool = build_pool([{"text": "a", "label": "x"}, {"text": "b"}], 768)
    assert pool.size == 2
    assert [e.id for e in pool.entries] == ["000000", "000001"]
    assert pool.entries[0].label_source is LabelSource.CORPUS
    assert pool.entries[1].label_source is LabelSource.NONE


def test_build_pool_dimension_mismatch_reports_line():
    with pytest.raises(DimensionMismatch, match="line 2"):
        build_pool([{"text": "a", "embedding": [1.0] * 768}, {"text": "b", "embedding": [1.0] * 767}], 768)


def test_build_pool_rejects_bad_records():
    with pytest.raises(SchemaError):
        build_pool([{"text": ""}], 4)
    with pytest.raises(SchemaError):
        build_pool([{"id": "a", "text": "x"}, {"id": "a", "text": "y"}], 4)
    with pytest.raises(ZeroVector):
        build_pool([{"text": "a", "embedding": [0, 0]}], 2)
    with pytest.raises(NonFiniteEmbedding):
        build_pool([{"text": "a", "embedding": [math.inf, 0]}], 2)


def test_unlabeled_998_entry_pool():
    pool = build_pool([{"text": f"comment {i}"} for i in range(998)], 768)
    assert pool.size == 998
    assert all(e.label_source is LabelSource.NONE and e.label is None for e in pool.entries)
    assert pool.embedded_count == 0


def test_entries_are_immutable_unit_float32():
    pool = random_pool(np.random.default_rng(1), 3, 5)
    emb = pool.entries[0].embedding
    assert emb.dtype == np.dtype("<f4")
    assert abs(np.linalg.norm(emb.astype(np.float64)) - 1.0) <= 1e-6
    with pytest.raises(ValueError):
        emb[0] = 2.0
    with pytest.raises(AttributeError):
        pool.entries[0].text = "changed"


def test_load_pool_records_from_jsonl(tmp_path):
    path = tmp_path / "pool.jsonl"
    path.write_text('{"id": "a", "text": "x", "embedding": [1, 0]}\n\n{"id": "b", "text": "y"}\n', encoding="utf-8")
    pool = load_pool_records(path, 2)
    assert [e.id for e in pool.entries] == ["a", "b"]
    path.write_text('{"id": "a", "text": "x"}\nnot json\n', encoding="utf-8")
    with pytest.raises(SchemaError, match="line 2"):
        load_pool_records(path, 2)


def _field_diff(a: SentencePool, b: SentencePool) -> list[str]:
    diffs = []
    if a.dim != b.dim or a.size != b.size:
        diffs.append("shape")
    for x, y in zip(a.entries, b.entries):
        for name in ("id", "text", "label", "label_source"):
            if getattr(x, name) != getattr(y, name):
                diffs.append(f"{x.id}.{name}")
        if (x.embedding is None) != (y.embedding is None):
            diffs.append(f"{x.id}.embedding presence")
        elif x.embedding is not None and x.embedding.tobytes() != y.embedding.tobytes():
            diffs.append(f"{x.id}.embedding")
    return diffs


def test_cache_round_trip_1000_entries(tmp_path):
    rng = np.random.default_rng(9)
    records = []
    for i in range(1000):
        rec = {"id": f"id-{i}", "text": f"texte numéro {i} ✓"}
        if i % 3:
            rec["label"] = f"L{i % 4}"
        if i % 7:
            rec["embedding"] = rng.standard_normal(32)
        records.append(rec)
    pool = build_pool(records, 32)
    loaded = load_pool(save_pool(pool, tmp_path / "p.parcpool"))
    assert _field_diff(pool, loaded) == []
    assert loaded == pool
    assert loaded.checksum() == pool.checksum()


def test_cache_rejects_unknown_version_and_corruption(tmp_path):
    pool = random_pool(np.random.default_rng(2), 10, 4)
    path = save_pool(pool, tmp_path / "p.parcpool")
    raw = bytearray(path.read_bytes())
    assert raw[:8] == CACHE_MAGIC

    bumped = bytearray(raw)
    bumped[8:12] = (99).to_bytes(4, "little")
    (tmp_path / "v.parcpool").write_bytes(bumped)
    with pytest.raises(SchemaError, match="version"):
        load_pool(tmp_path / "v.parcpool")

    flipped = bytearray(raw)
    flipped[-40] ^= 0xFF
    (tmp_path / "c.parcpool").write_bytes(flipped)
    with pytest.raises(ChecksumMismatch):
        load_pool(tmp_path / "c.parcpool")

    (tmp_path / "m.parcpool").write_bytes(b"NOTAPOOL" + raw[8:])
    with pytest.raises(SchemaError):
        load_pool(tmp_path / "m.parcpool")


def test_pool_entry_label_source_consistency():
    with pytest.raises(SchemaError):
        PoolEntry("a", "text", None, None, LabelSource.CORPUS)
    with pytest.raises(SchemaError):
        PoolEntry("a", "text", "lbl", None, LabelSource.NONE)
    e = PoolEntry("a", "text").with_label("x")
    assert e.label_source is LabelSource.SELF_PREDICTED


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 40),
    st.integers(1, 12),
    st.integers(1, 50),
    st.integers(0, 2**32 - 1),
)
def test_retrieval_properties(size, dim, k, seed):
    rng = np.random.default_rng(seed)
    pool = random_pool(rng, size, dim)
    r = retrieve_top_k(rng.standard_normal(dim), pool, k)
    assert len(r.hits) == min(k, size)
    assert len(set(r.ids)) == len(r.ids)
    sims = [h.similarity for h in r.hits]
    assert sims == sorted(sims, reverse=True)
    assert all(-1.0 <= s <= 1.0 for s in sims)
