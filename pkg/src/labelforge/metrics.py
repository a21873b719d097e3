"""Caption evaluation: exact match, BLEU@1-4, ROUGE-L, CIDEr-D, METEOR-lite.

All metrics take pre-normalized word lists and return values in [0, 1].
METEOR here is a deliberately simplified exact-match variant (no stemming
or synonym resources) and is reported as ``meteor_lite`` everywhere so it
is never mistaken for scores from the full metric.

Pinned conventions:

* BLEU@n is the geometric mean of clipped modified k-gram precisions for
  k = 1..n times the brevity penalty ``min(1, exp(1 - r/c))``. An order
  with no prediction k-grams is vacuous (counts as precision 1) when the
  reference has none either, and fails (precision 0) otherwise, so equal
  non-empty pairs always score 1.
* ROUGE-L is the LCS F-measure ``(1 + b^2) R P / (R + b^2 P)`` with
  recall weight b = 1.2.
* CIDEr-D uses tf-idf n-gram vectors with idf taken over the reference
  corpus, clipped cosine similarity, a gaussian length penalty with
  sigma = 6, a x10 scale, and a final /10 back into [0, 1].
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .jsonl import FORMAT_VERSION

WordSeq = Sequence[str]

CIDER_SIGMA = 6.0
CIDER_MAX_N = 4
ROUGE_BETA = 1.2


def _as_reference_list(refs) -> list[list[str]]:
    """Normalize a single reference or a list of references."""
    refs = list(refs)
    if refs and isinstance(refs[0], str):
        return [refs]
    if not refs:
        return [[]]
    return [list(r) for r in refs]


def exact_match(pred: WordSeq, ref: WordSeq) -> int:
    """1 iff the sequences are identical, else 0."""
    return int(list(pred) == list(ref))


def corpus_exact_match(preds: Sequence[WordSeq], refs: Sequence[WordSeq]) -> float:
    if len(preds) != len(refs):
        raise ValueError("prediction/reference length mismatch")
    if not preds:
        raise ValueError("empty corpus")
    return sum(exact_match(p, r) for p, r in zip(preds, refs)) / len(preds)


def ngram_counts(words: WordSeq, n: int) -> Counter:
    words = list(words)
    return Counter(tuple(words[i : i + n]) for i in range(len(words) - n + 1))


def bleu(pred: WordSeq, refs, n: int) -> float:
    """Sentence BLEU@n against one or more references."""
    if n not in (1, 2, 3, 4):
        raise ValueError("n must be in 1..4")
    pred = list(pred)
    references = _as_reference_list(refs)
    if not pred:
        return 0.0
    log_precision_sum = 0.0
    for k in range(1, n + 1):
        pred_counts = ngram_counts(pred, k)
        total = sum(pred_counts.values())
        if total == 0:
            if any(len(r) >= k for r in references):
                return 0.0
            continue  # vacuous order: neither side has k-grams
        clipped = 0
        for gram, count in pred_counts.items():
            clipped += min(count, max(ngram_counts(r, k).get(gram, 0) for r in references))
        if clipped == 0:
            return 0.0
        log_precision_sum += math.log(clipped / total)
    c = len(pred)
    # closest reference length; ties prefer the shorter reference
    r = min((abs(len(ref) - c), len(ref)) for ref in references)[1]
    brevity = min(1.0, math.exp(1.0 - r / c))
    return brevity * math.exp(log_precision_sum / n)


def lcs_length(a: WordSeq, b: WordSeq) -> int:
    """Longest common subsequence length by dynamic programming."""
    a, b = list(a), list(b)
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[len(a)][len(b)]


def rouge_l(pred: WordSeq, ref: WordSeq, beta: float = ROUGE_BETA) -> float:
    """LCS F-measure with recall weighted by ``beta``."""
    pred, ref = list(pred), list(ref)
    if not pred or not ref:
        return 0.0
    lcs = lcs_length(pred, ref)
    if lcs == 0:
        return 0.0
    recall = lcs / len(ref)
    precision = lcs / len(pred)
    return (1 + beta**2) * recall * precision / (recall + beta**2 * precision)


def meteor_lite(pred: WordSeq, ref: WordSeq) -> float:
    """Exact-unigram METEOR: harmonic mean with a chunk fragmentation penalty.

    Each prediction word aligns to the leftmost unmatched identical
    reference word. With m matches, P = m/|pred|, R = m/|ref|,
    F = 10PR / (R + 9P), penalty = 0.5 (chunks/m)^3.
    """
    pred, ref = list(pred), list(ref)
    taken = [False] * len(ref)
    alignment: list[tuple[int, int]] = []
    for i, word in enumerate(pred):
        for j, ref_word in enumerate(ref):
            if not taken[j] and ref_word == word:
                taken[j] = True
                alignment.append((i, j))
                break
    m = len(alignment)
    if m == 0:
        return 0.0
    precision = m / len(pred)
    recall = m / len(ref)
    f_mean = 10 * precision * recall / (recall + 9 * precision)
    chunks = 1
    for (i_prev, j_prev), (i_cur, j_cur) in zip(alignment, alignment[1:]):
        if i_cur != i_prev + 1 or j_cur != j_prev + 1:
            chunks += 1
    penalty = 0.5 * (chunks / m) ** 3
    return f_mean * (1.0 - penalty)


def _tfidf_vectors(words: WordSeq, idf: list[dict], max_n: int) -> list[dict]:
    vectors = []
    for k in range(1, max_n + 1):
        counts = ngram_counts(words, k)
        vectors.append({g: c * idf[k - 1].get(g, idf[k - 1]["__default__"]) for g, c in counts.items()})
    return vectors


def cider_d(
    preds: Sequence[WordSeq],
    refs,
    sigma: float = CIDER_SIGMA,
    max_n: int = CIDER_MAX_N,
) -> float:
    """Corpus CIDEr-D, normalized into [0, 1] by the final /10.

    Document frequencies are taken over the reference corpus; an item with
    several references averages its per-reference similarities. At least
    two items are required for the idf to be defined.
    """
    ref_sets = [_as_reference_list(r) for r in refs]
    if len(preds) != len(ref_sets):
        raise ValueError("prediction/reference length mismatch")
    if len(preds) < 2:
        raise ValueError("CIDEr-D needs a corpus of at least 2 items")

    total_items = len(ref_sets)
    log_total = math.log(total_items)
    idf: list[dict] = []
    for k in range(1, max_n + 1):
        document_frequency: Counter = Counter()
        for ref_set in ref_sets:
            grams = set()
            for ref in ref_set:
                grams.update(ngram_counts(ref, k))
            document_frequency.update(grams)
        table = {g: log_total - math.log(max(1.0, df)) for g, df in document_frequency.items()}
        table["__default__"] = log_total  # unseen n-grams have df 0
        idf.append(table)

    score_sum = 0.0
    for pred, ref_set in zip(preds, ref_sets):
        pred_vecs = _tfidf_vectors(pred, idf, max_n)
        per_ref = []
        for ref in ref_set:
            ref_vecs = _tfidf_vectors(ref, idf, max_n)
            delta = abs(len(ref) - len(list(pred)))
            penalty = math.exp(-(delta**2) / (2 * sigma**2))
            sims = []
            for k in range(max_n):
                pv, rv = pred_vecs[k], ref_vecs[k]
                numer = sum(min(pv[g], rv[g]) * rv[g] for g in pv if g in rv)
                pred_norm = math.sqrt(sum(v * v for v in pv.values()))
                ref_norm = math.sqrt(sum(v * v for v in rv.values()))
                sim = numer / (pred_norm * ref_norm) if pred_norm > 0 and ref_norm > 0 else 0.0
                sims.append(sim * penalty)
            per_ref.append(10.0 * sum(sims) / max_n)
        score_sum += sum(per_ref) / len(per_ref)
    return (score_sum / total_items) / 10.0


@dataclass
class MetricReport:
    """Per-corpus scores; every value lies in [0, 1]."""

    exact_match: float
    bleu: tuple[float, float, float, float]
    rouge_l: float
    cider_d: float
    meteor_lite: float
    n: int

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "metric-report",
            "n": self.n,
            "exact_match": self.exact_match,
            "bleu_1": self.bleu[0],
            "bleu_2": self.bleu[1],
            "bleu_3": self.bleu[2],
            "bleu_4": self.bleu[3],
            "rouge_l": self.rouge_l,
            "cider_d": self.cider_d,
            "meteor_lite": self.meteor_lite,
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def evaluate_corpus(predictions: Sequence[WordSeq], references: Sequence[WordSeq]) -> MetricReport:
    """Compute the full metric suite over aligned prediction/reference lists."""
    predictions = [list(p) for p in predictions]
    references = [list(r) for r in references]
    if len(predictions) != len(references):
        raise ValueError("prediction/reference length mismatch")
    if len(predictions) < 2:
        raise ValueError("evaluation needs at least 2 aligned pairs")
    bleu_means = tuple(
        sum(bleu(p, r, n) for p, r in zip(predictions, references)) / len(predictions)
        for n in (1, 2, 3, 4)
    )
    return MetricReport(
        exact_match=corpus_exact_match(predictions, references),
        bleu=bleu_means,  # type: ignore[arg-type]
        rouge_l=sum(rouge_l(p, r) for p, r in zip(predictions, references)) / len(predictions),
        cider_d=cider_d(predictions, references),
        meteor_lite=sum(meteor_lite(p, r) for p, r in zip(predictions, references)) / len(predictions),
        n=len(predictions),
    )
