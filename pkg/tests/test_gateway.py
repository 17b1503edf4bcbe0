from __future__ import annotations

import math
import socket

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from parc import gateway
from parc.errors import (
    BackendKindError,
    BackendRejection,
    DimensionMismatch,
    NoMaskMarker,
    SchemaError,
    TransportError,
)
from parc.gateway import (
    BackendDescriptor,
    CandidateScore,
    LabelOptionSet,
    MockBackend,
    ParseStatus,
    best_candidate,
    map_generation_to_label,
    normalize_answer,
    predict,
    self_predict_labels,
    trim_at_stop,
)
from parc.prompts import render_zero_shot, shipped_registry
from parc.stub_server import StubServer, fail_first, fixed_outputs, mock_responder
from parc.vector_store import LabelSource, build_pool

VIOLENS = LabelOptionSet.from_mapping(
    {
        "Non-Violence": "non-aggressive",
        "Passive Violence": "slightly aggressive",
        "Direct Violence": "highly aggressive",
    }
)
MBERT = shipped_registry("viol-lens-main")["violens-main-mbert"]
BLOOMZ = shipped_registry("viol-lens-main")["violens-main-bloomz"]


def desc(kind: str, endpoint: str = "mock:0", **kw) -> BackendDescriptor:
    return BackendDescriptor(kind=kind, endpoint=endpoint, **kw)


def closed_port_url() -> str:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    return f"http://127.0.0.1:{port}/"


def test_descriptor_validation():
    with pytest.raises(ValueError):
        desc("generation", "ftp://x")
    with pytest.raises(ValueError):
        desc("generation", timeout=0)
    assert desc("embedding").embedding_dim == 768
    a = desc("generation", timeout=5)
    b = desc("generation", timeout=50, max_concurrency=9)
    assert a.cache_key() == b.cache_key()
    assert a.cache_key() != desc("generation", "mock:1").cache_key()


def test_mock_generation_is_deterministic():
    prompts = ["alpha", "beta gamma delta", "বাংলা লেখা"]
    first = [gateway.generate(desc("generation", "mock:42"), p) for p in prompts]
    again = [MockBackend(desc("generation", "mock:42")).generate(p) for p in prompts]
    assert first == again
    assert gateway.generate(desc("generation"), "alpha beta") in ("alpha", "beta", "alpha beta")


def test_mock_generation_votes_demonstration_answers():
    prompt = "a?\nslightly aggressive\n\nb?\nslightly aggressive\n\nc?\nhighly aggressive\n\nquery?"
    out = gateway.generate(desc("generation"), prompt, VIOLENS.all_surfaces())
    assert out == "slightly aggressive"


def test_mock_generation_respects_max_new_tokens():
    d = desc("generation", decode_params={"max_new_tokens": 3})
    out = gateway.generate(d, " ".join(f"w{i}" for i in range(20)))
    assert len(out.split()) == 3


def test_stub_pass_through():
    with StubServer(fixed_outputs("slightly aggressive")) as srv:
        d = desc("generation", srv.url, model_name="bloomz-3b")
        assert gateway.generate(d, "prompt") == "slightly aggressive"
        body = srv.received[0]
        assert body["model"] == "bloomz-3b" and body["kind"] == "generation"
        assert body["inputs"] == ["prompt"] and body["params"]["temperature"] == 0


def test_stub_serves_mock_bytes_identically():
    with StubServer(mock_responder("fill_mask", seed=5)) as srv:
        remote = gateway.fill_mask(desc("fill_mask", srv.url), "x [MASK] y", ["a", "b"])
    local = gateway.fill_mask(desc("fill_mask", "mock:5"), "x [MASK] y", ["a", "b"])
    assert remote == local


def test_unreachable_endpoint_counts_attempts():
    d = desc("generation", closed_port_url(), max_retries=3, retry_backoff=0, timeout=2)
    with pytest.raises(TransportError) as info:
        gateway.generate(d, "hello")
    assert info.value.attempts == 3
    assert "after 3 attempts" in str(info.value)


def test_retries_recover_from_transient_failures():
    with StubServer(fail_first(2, fixed_outputs("ok"))) as srv:
        assert gateway.generate(desc("generation", srv.url, max_retries=3, retry_backoff=0), "p") == "ok"
        assert srv.request_count == 3
    with StubServer(fail_first(2, fixed_outputs("ok"))) as srv:
        with pytest.raises(TransportError) as info:
            gateway.generate(desc("generation", srv.url, max_retries=2, retry_backoff=0), "p")
        assert info.value.attempts == 2 and srv.request_count == 2


def test_permanent_errors_are_not_retried():
    with StubServer(fail_first(5, fixed_outputs("ok"), status=400)) as srv:
        with pytest.raises(BackendRejection) as info:
            gateway.generate(desc("generation", srv.url, max_retries=3, retry_backoff=0), "p")
        assert info.value.status == 400 and srv.request_count == 1

    with StubServer(lambda body, attempt: (200, {"status": "error", "error": "model overloaded"})) as srv:
        with pytest.raises(BackendRejection, match="model overloaded"):
            gateway.generate(desc("generation", srv.url, retry_backoff=0), "p")


def test_embedding_dimension_checks():
    vecs = gateway.embed(desc("embedding"), ["a", "b", "c"])
    assert len(vecs) == 3 and all(v.shape == (768,) for v in vecs)
    again = gateway.embed(desc("embedding"), ["a", "a"])
    assert np.array_equal(again[0], again[1]) and np.array_equal(again[0], vecs[0])

    with StubServer(mock_responder("embedding", seed=0, dim=512)) as srv:
        with pytest.raises(DimensionMismatch):
            gateway.embed(desc("embedding", srv.url, dim=768), ["a"])


def test_fill_mask_scores_every_candidate():
    scores = gateway.fill_mask(desc("fill_mask"), "The underlying theme in X is [MASK].", MBERT.verbalizer.words)
    assert [s.word for s in scores] == ["assaultive", "indirect", "peaceful"]
    assert all(math.isfinite(s.score) and not s.flagged for s in scores)
    single = gateway.fill_mask(desc("fill_mask"), "[MASK]", ["only"])
    assert best_candidate(single).word == "only"


def test_fill_mask_requires_one_mask_and_right_kind():
    with pytest.raises(NoMaskMarker):
        gateway.fill_mask(desc("fill_mask"), "no marker here", ["a"])
    with pytest.raises(NoMaskMarker):
        gateway.fill_mask(desc("fill_mask"), "[MASK] and [MASK]", ["a"])
    with pytest.raises(BackendKindError):
        gateway.generate(desc("fill_mask"), "p")


def test_unscorable_candidate_is_flagged():
    def respond(body, attempt):
        return 200, {"status": "ok", "scores": [[0.2, None, 0.1]]}

    with StubServer(respond) as srv:
        scores = gateway.fill_mask(desc("fill_mask", srv.url), "[MASK]", ["a", "b", "c"])
    assert scores[1] == CandidateScore("b", -math.inf, True)
    assert best_candidate(scores).word == "a"
    assert best_candidate([CandidateScore("x", -math.inf, True)]) is None


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=6), st.floats(0.01, 100))
def test_argmax_invariant_under_positive_scaling(raw, scale):
    words = [f"w{i}" for i in range(len(raw))]
    a = best_candidate([CandidateScore(w, s) for w, s in zip(words, raw)])
    b = best_candidate([CandidateScore(w, s * scale) for w, s in zip(words, raw)])
    assert a.word == b.word


def test_map_generation_examples():
    p = map_generation_to_label("Slightly Aggressive.", VIOLENS)
    assert (p.mapped_label, p.parse_status) == ("Passive Violence", ParseStatus.MATCHED)
    assert map_generation_to_label("highly aggressive", VIOLENS).mapped_label == "Direct Violence"
    miss = map_generation_to_label("xyzzy", VIOLENS)
    assert miss.mapped_label is None and miss.parse_status is ParseStatus.UNPARSED
    fb = map_generation_to_label("xyzzy", VIOLENS, fallback="Non-Violence")
    assert (fb.mapped_label, fb.parse_status) == ("Non-Violence", ParseStatus.FALLBACK)


def test_map_generation_prefers_longest_then_earliest():
    opts = LabelOptionSet.from_mapping({"neg": "not good", "pos": "good"})
    assert map_generation_to_label("it is not good", opts).mapped_label == "neg"
    opts = LabelOptionSet.from_mapping({"a": "cat", "b": "dog"})
    assert map_generation_to_label("dog and cat", opts).mapped_label == "b"
    assert normalize_answer("  Highly\n  AGGRESSIVE ") == "highly aggressive"


def test_option_set_rejects_ambiguity():
    with pytest.raises(SchemaError):
        LabelOptionSet.from_mapping({"a": "Same", "b": "same"})
    with pytest.raises(SchemaError):
        LabelOptionSet(())


def test_trim_at_stop():
    assert trim_at_stop("answer\n\nmore", ["\n\n"]) == "answer"
    assert trim_at_stop("abc", []) == "abc"


def test_predict_dispatches_on_style():
    prompt = "The underlying theme in a is peaceful.\n\nThe underlying theme in q is [MASK]."
    masked = predict(desc("fill_mask"), prompt, MBERT, VIOLENS)
    assert masked.mapped_label == "Non-Violence" and isinstance(masked.raw_output, list)
    gen_prompt = render_zero_shot("x", BLOOMZ).full_text + "\nnon-aggressive\n\n" + render_zero_shot("q", BLOOMZ).full_text
    generated = predict(desc("generation"), gen_prompt, BLOOMZ, VIOLENS)
    assert generated.mapped_label == "Non-Violence" and generated.raw_output == "non-aggressive"


def _unlabeled(n: int):
    return build_pool([{"id": f"c{i}", "text": f"comment {i}"} for i in range(n)], 8)


def test_self_predict_labels_998_entries():
    pool = _unlabeled(998)
    labeled = self_predict_labels(pool, desc("fill_mask", "mock:1"), MBERT, VIOLENS, parallelism=4)
    assert labeled.size == 998
    assert all(e.label in VIOLENS.labels and e.label_source is LabelSource.SELF_PREDICTED for e in labeled.entries)
    again = self_predict_labels(pool, desc("fill_mask", "mock:1"), MBERT, VIOLENS)
    assert [e.label for e in again.entries] == [e.label for e in labeled.entries]
    assert pool.entries[0].label is None


def test_self_predict_is_noop_on_labeled_pool():
    pool = build_pool([{"text": "x", "label": "Non-Violence"}, {"text": "y", "label": "Direct Violence"}], 8)
    assert self_predict_labels(pool, desc("generation"), BLOOMZ, VIOLENS) is pool


def test_self_predict_aborts_without_partial_pool():
    calls = {"n": 0}

    def respond(body, attempt):
        calls["n"] += 1
        if "comment 3" in body["inputs"][0]:
            return 400, {"status": "error", "error": "bad input"}
        return 200, {"status": "ok", "outputs": ["non-aggressive"]}

    pool = _unlabeled(6)
    with StubServer(respond) as srv:
        with pytest.raises(BackendRejection):
            self_predict_labels(pool, desc("generation", srv.url, retry_backoff=0), BLOOMZ, VIOLENS)
    assert all(e.label is None for e in pool.entries)
