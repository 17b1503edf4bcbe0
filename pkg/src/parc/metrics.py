"""Classification and summarization metrics.

Conventions:

* Any zero denominator yields 0.0, never NaN.
* Unparsed predictions (``None``) land in an extra ``unparsed`` column of the
  confusion matrix: they count toward support and the total, never toward a
  class's predicted count or the diagonal.
* Tokens for ROUGE and LEAD-n come from :func:`tokenize`: split on Unicode
  whitespace, strip leading/trailing punctuation, lowercase Latin letters
  only, no stemming.
"""

from __future__ import annotations

import unicodedata
from collections import Counter
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import (
    EmptyMatrix,
    EmptyReference,
    LabelSetMismatch,
    LengthMismatch,
    UnknownLabel,
)
from .gateway import Prediction

UNPARSED = "unparsed"
DELTA_DECIMALS = 12


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Rows are gold labels, columns predicted labels (+ ``unparsed``)."""

    labels: tuple[str, ...]
    counts: np.ndarray
    has_unparsed: bool = False

    @property
    def columns(self) -> tuple[str, ...]:
        return self.labels + ((UNPARSED,) if self.has_unparsed else ())

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def unparsed_count(self) -> int:
        return int(self.counts[:, -1].sum()) if self.has_unparsed else 0

    def cell(self, gold: str, pred: str | None) -> int:
        col = len(self.labels) if pred is None or pred == UNPARSED else self.labels.index(pred)
        if col == len(self.labels) and not self.has_unparsed:
            return 0
        return int(self.counts[self.labels.index(gold), col])

    def to_dict(self) -> dict[str, Any]:
        return {"labels": list(self.labels), "columns": list(self.columns), "counts": self.counts.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ConfusionMatrix:
        labels = tuple(d["labels"])
        counts = np.asarray(d["counts"], dtype=np.int64).reshape(len(labels), -1)
        return cls(labels, counts, counts.shape[1] == len(labels) + 1)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        return (
            self.labels == other.labels
            and self.has_unparsed == other.has_unparsed
            and np.array_equal(self.counts, other.counts)
        )

    __hash__ = None  # type: ignore[assignment]


def _pred_label(p: Prediction | str | None) -> str | None:
    if isinstance(p, Prediction):
        return p.mapped_label
    return p


def confusion_matrix(
    gold: Sequence[str], pred: Sequence[Prediction | str | None], labels: Sequence[str]
) -> ConfusionMatrix:
    if len(gold) != len(pred):
        raise LengthMismatch(f"{len(gold)} gold labels vs {len(pred)} predictions")
    if not gold:
        raise EmptyMatrix("no examples to score")
    labels = tuple(str(lbl) for lbl in labels)
    index = {lbl: i for i, lbl in enumerate(labels)}
    preds = [_pred_label(p) for p in pred]
    has_unparsed = any(p is None for p in preds)
    counts = np.zeros((len(labels), len(labels) + int(has_unparsed)), dtype=np.int64)
    for g, p in zip(gold, preds):
        g = str(g)
        if g not in index:
            raise UnknownLabel(f"gold label {g!r} not in {list(labels)}")
        if p is None:
            col = len(labels)
        elif str(p) in index:
            col = index[str(p)]
        else:
            raise UnknownLabel(f"predicted label {p!r} not in {list(labels)}")
        counts[index[g], col] += 1
    return ConfusionMatrix(labels, counts, has_unparsed)


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float

    def to_dict(self) -> dict[str, float]:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1}


@dataclass(frozen=True)
class ClassScores:
    precision: float
    recall: float
    f1: float
    support: int

    def to_dict(self) -> dict[str, float | int]:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1, "support": self.support}


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r else 0.0


@dataclass(frozen=True)
class ClassificationReport:
    per_class: dict[str, ClassScores]
    accuracy: float
    macro_avg: PRF
    weighted_avg: PRF
    total: int
    unparsed: int = 0

    @property
    def labels(self) -> list[str]:
        return list(self.per_class)

    def f1(self, average: str = "macro") -> float:
        if average == "macro":
            return self.macro_avg.f1
        if average == "weighted":
            return self.weighted_avg.f1
        if average in ("accuracy", "micro"):
            return self.accuracy
        raise ValueError(f"unknown average {average!r}")

    def to_dict(self) -> dict[str, Any]:
        def show(x: float) -> str:
            return f"{x:.2f}"

        return {
            "per_class": {k: v.to_dict() for k, v in self.per_class.items()},
            "accuracy": self.accuracy,
            "macro_avg": self.macro_avg.to_dict(),
            "weighted_avg": self.weighted_avg.to_dict(),
            "total": self.total,
            "unparsed": self.unparsed,
            "display": {
                "accuracy": show(self.accuracy),
                "macro_avg": {k: show(v) for k, v in self.macro_avg.to_dict().items()},
                "weighted_avg": {k: show(v) for k, v in self.weighted_avg.to_dict().items()},
            },
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ClassificationReport:
        return cls(
            per_class={k: ClassScores(**v) for k, v in d["per_class"].items()},
            accuracy=d["accuracy"],
            macro_avg=PRF(**d["macro_avg"]),
            weighted_avg=PRF(**d["weighted_avg"]),
            total=d["total"],
            unparsed=d.get("unparsed", 0),
        )


def classification_report(cm: ConfusionMatrix) -> ClassificationReport:
    total = cm.total
    if total == 0:
        raise EmptyMatrix("confusion matrix holds no examples")
    n = len(cm.labels)
    square = cm.counts[:, :n]
    per_class = {}
    for i, lbl in enumerate(cm.labels):
        tp = int(square[i, i])
        predicted = int(square[:, i].sum())
        support = int(cm.counts[i, :].sum())
        p, r = _ratio(tp, predicted), _ratio(tp, support)
        per_class[lbl] = ClassScores(p, r, _f1(p, r), support)

    scores = list(per_class.values())
    macro = PRF(*(float(np.mean([getattr(s, f) for s in scores])) for f in ("precision", "recall", "f1")))
    weighted = PRF(
        *(_ratio(sum(getattr(s, f) * s.support for s in scores), total) for f in ("precision", "recall", "f1"))
    )
    return ClassificationReport(
        per_class=per_class,
        accuracy=int(np.trace(square)) / total,
        macro_avg=macro,
        weighted_avg=weighted,
        total=total,
        unparsed=cm.unparsed_count,
    )


# ---------------------------------------------------------------- ROUGE


def _is_latin(ch: str) -> bool:
    return "LATIN" in unicodedata.name(ch, "")


def _strip_punct(token: str) -> str:
    start, end = 0, len(token)
    while start < end and unicodedata.category(token[start]).startswith("P"):
        start += 1
    while end > start and unicodedata.category(token[end - 1]).startswith("P"):
        end -= 1
    return token[start:end]


def tokenize(text: str) -> list[str]:
    tokens = []
    for raw in text.split():
        tok = _strip_punct(raw)
        if tok:
            tokens.append("".join(ch.lower() if _is_latin(ch) else ch for ch in tok))
    return tokens


def ngrams(tokens: Sequence[str], n: int) -> Counter[tuple[str, ...]]:
    """n-gram counts; a non-empty sequence shorter than ``n`` counts as one n-gram."""
    if not tokens:
        return Counter()
    if len(tokens) < n:
        return Counter([tuple(tokens)])
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _prf(hits: int, n_candidate: int, n_reference: int) -> PRF:
    p, r = _ratio(hits, n_candidate), _ratio(hits, n_reference)
    return PRF(p, r, _f1(p, r))


def rouge_n(candidate: Sequence[str], reference: Sequence[str], n: int) -> PRF:
    c, r = ngrams(candidate, n), ngrams(reference, n)
    overlap = sum((c & r).values())
    return _prf(overlap, sum(c.values()), sum(r.values()))


def lcs_table(a: Sequence[str], b: Sequence[str]) -> list[list[int]]:
    t = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        ai, row, prev = a[i - 1], t[i], t[i - 1]
        for j in range(1, len(b) + 1):
            row[j] = prev[j - 1] + 1 if ai == b[j - 1] else max(prev[j], row[j - 1])
    return t


def lcs_indices(ref: Sequence[str], cand: Sequence[str]) -> list[int]:
    """Positions in ``ref`` of one longest common subsequence with ``cand``."""
    t = lcs_table(ref, cand)
    i, j, out = len(ref), len(cand), []
    while i > 0 and j > 0:
        if ref[i - 1] == cand[j - 1]:
            out.append(i - 1)
            i -= 1
            j -= 1
        elif t[i][j - 1] > t[i - 1][j]:
            j -= 1
        else:
            i -= 1
    out.reverse()
    return out


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> PRF:
    lcs = lcs_table(candidate, reference)[-1][-1] if candidate and reference else 0
    return _prf(lcs, len(candidate), len(reference))


def rouge_lsum(candidate_sents: Sequence[Sequence[str]], reference_sents: Sequence[Sequence[str]]) -> PRF:
    """Summary-level LCS: union of per-sentence LCS hits, clipped by token counts."""
    m = sum(len(s) for s in reference_sents)
    n = sum(len(s) for s in candidate_sents)
    if not m or not n:
        return PRF(0.0, 0.0, 0.0)
    ref_left: Counter[str] = Counter(t for s in reference_sents for t in s)
    cand_left: Counter[str] = Counter(t for s in candidate_sents for t in s)
    hits = 0
    for ref in reference_sents:
        union: set[int] = set()
        for cand in candidate_sents:
            union.update(lcs_indices(ref, cand))
        for idx in sorted(union):
            tok = ref[idx]
            if ref_left[tok] > 0 and cand_left[tok] > 0:
                hits += 1
                ref_left[tok] -= 1
                cand_left[tok] -= 1
    return _prf(hits, n, m)


def split_sentences(text: str) -> list[list[str]]:
    return [toks for toks in (tokenize(line) for line in text.split("\n")) if toks]


@dataclass(frozen=True)
class RougeScores:
    r1: PRF
    r2: PRF
    rl: PRF
    rlsum: PRF

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {k: getattr(self, k).to_dict() for k in ("r1", "r2", "rl", "rlsum")}
        d["display"] = {k: f"{100 * getattr(self, k).f1:.2f}" for k in ("r1", "r2", "rl", "rlsum")}
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> RougeScores:
        return cls(*(PRF(**d[k]) for k in ("r1", "r2", "rl", "rlsum")))


def rouge_scores(candidate: str, reference: str) -> RougeScores:
    ref_tokens = tokenize(reference)
    if not ref_tokens:
        raise EmptyReference("reference has no tokens")
    cand_tokens = tokenize(candidate)
    return RougeScores(
        r1=rouge_n(cand_tokens, ref_tokens, 1),
        r2=rouge_n(cand_tokens, ref_tokens, 2),
        rl=rouge_l(cand_tokens, ref_tokens),
        rlsum=rouge_lsum(split_sentences(candidate), split_sentences(reference)),
    )


def mean_rouge(scores: Sequence[RougeScores]) -> RougeScores:
    """Corpus score as the per-field mean over examples."""
    if not scores:
        raise EmptyMatrix("no ROUGE scores to average")

    def avg(key: str) -> PRF:
        parts = [getattr(s, key) for s in scores]
        return PRF(*(float(np.mean([getattr(p, f) for p in parts])) for f in ("precision", "recall", "f1")))

    return RougeScores(avg("r1"), avg("r2"), avg("rl"), avg("rlsum"))


def lead_n(text: str, n: int = 64) -> str:
    """First ``n`` tokens of ``text``, joined by single spaces."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return " ".join(tokenize(text)[:n])


# ---------------------------------------------------------------- tables


@dataclass(frozen=True)
class F1Row:
    config: str
    f1: float
    delta: float | None

    @property
    def display(self) -> str:
        return f"{self.f1:.2f}"

    @property
    def delta_display(self) -> str | None:
        return None if self.delta is None else f"{self.delta:+.2f}"


def f1_delta(value: float, baseline: float) -> float:
    # rounding cancels binary drift such as 0.20 - 0.19 != 0.01
    return round(value - baseline, DELTA_DECIMALS)


def f1_table(
    reports: Mapping[str, ClassificationReport | float],
    baseline: str = "zero_shot",
    average: str = "macro",
) -> list[F1Row]:
    """One row per configuration with its F1 and the delta to ``baseline``.

    ``reports`` maps a configuration name (``zero_shot``, ``k=1``, ...) to a
    report or directly to an F1 value; the baseline row's delta is None.
    """
    label_sets = {tuple(r.labels) for r in reports.values() if isinstance(r, ClassificationReport)}
    if len(label_sets) > 1:
        raise LabelSetMismatch(f"reports disagree on labels: {sorted(label_sets)}")
    values = {k: r.f1(average) if isinstance(r, ClassificationReport) else float(r) for k, r in reports.items()}
    if baseline not in values:
        raise KeyError(f"baseline configuration {baseline!r} missing")
    base = values[baseline]
    return [F1Row(k, v, None if k == baseline else f1_delta(v, base)) for k, v in values.items()]
