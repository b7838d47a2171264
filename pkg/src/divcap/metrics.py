"""Caption fidelity and diversity metrics.

All functions operate on token lists (normalized lowercase words). BLEU-family
scores are reported on a 0-100 scale. CIDEr follows the consensus-metric
convention: TF-IDF weighted n-gram cosine averaged over references and orders
1..4, with a Gaussian length penalty and clipped candidate counts, scaled by
10; reports multiply the raw value by 100 (so raw 0.400 prints as 40.0).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

Tokens = Sequence[str]

CIDER_MAX_ORDER = 4
CIDER_LENGTH_SIGMA = 6.0


class MetricError(ValueError):
    pass


def ngram_counts(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


@dataclass(frozen=True)
class NGramProfile:
    """Counts of n-grams of orders 1..4 plus the total token count."""

    counts: tuple[Counter, ...]
    n_tokens: int

    @classmethod
    def of(cls, tokens: Tokens, max_order: int = CIDER_MAX_ORDER) -> "NGramProfile":
        return cls(
            tuple(ngram_counts(tokens, n) for n in range(1, max_order + 1)),
            len(tokens),
        )


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def _clipped_matches(candidate: Tokens, references: Sequence[Tokens], n: int) -> tuple[int, int]:
    cand = ngram_counts(candidate, n)
    total = sum(cand.values())
    if not cand:
        return 0, 0
    best = Counter()
    for ref in references:
        for gram, count in ngram_counts(ref, n).items():
            if count > best[gram]:
                best[gram] = count
    matched = sum(min(count, best[gram]) for gram, count in cand.items())
    return matched, total


def _brevity_penalty(cand_len: int, ref_lens: Sequence[int]) -> float:
    # closest reference length, ties resolved toward the shorter one
    r = min(ref_lens, key=lambda L: (abs(L - cand_len), L))
    if cand_len >= r:
        return 1.0
    return math.exp(1.0 - r / cand_len)


def bleu_n(candidate: Tokens, references: Sequence[Tokens], n: int, smooth: bool = False) -> float:
    """Sentence BLEU_n on a 0-100 scale.

    Clipped n-gram precision, geometric mean over orders 1..n, brevity
    penalty against the closest reference length. ``smooth`` applies add-one
    smoothing to higher orders (>= 2) with zero matches (used by mBLEU, where
    short captions routinely share no 4-grams); zero unigram overlap always
    scores 0.
    """
    if not 1 <= n <= 4:
        raise MetricError("n must be in 1..4")
    if not references:
        raise MetricError("references must be nonempty")
    if not candidate:
        return 0.0
    log_sum = 0.0
    for order in range(1, n + 1):
        matched, total = _clipped_matches(candidate, references, order)
        if matched == 0:
            if not smooth or order == 1:
                return 0.0
            p = (matched + 1.0) / (total + 1.0)
        else:
            p = matched / total
        log_sum += math.log(p)
    bp = _brevity_penalty(len(candidate), [len(r) for r in references])
    return 100.0 * bp * math.exp(log_sum / n)


def corpus_bleu(
    candidates: Sequence[Tokens],
    references_list: Sequence[Sequence[Tokens]],
    n: int = 4,
) -> float:
    """Corpus-level BLEU_n (0-100): pooled clipped counts, corpus brevity penalty."""
    if len(candidates) != len(references_list):
        raise MetricError("candidate / reference collections differ in length")
    matched = [0] * n
    total = [0] * n
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references_list):
        if not refs:
            raise MetricError("every candidate needs at least one reference")
        cand_len += len(cand)
        ref_len += min((len(r) for r in refs), key=lambda L: (abs(L - len(cand)), L))
        for order in range(1, n + 1):
            m, t = _clipped_matches(cand, refs, order)
            matched[order - 1] += m
            total[order - 1] += t
    if any(m == 0 for m in matched):
        return 0.0
    log_sum = sum(math.log(m / t) for m, t in zip(matched, total))
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / max(cand_len, 1))
    return 100.0 * bp * math.exp(log_sum / n)


# ---------------------------------------------------------------------------
# CIDEr
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IdfTable:
    """Inverse-document-frequency weights over a reference corpus.

    One document is the full reference set of one clip. N-grams never seen in
    the corpus get the maximum weight log(num_docs).
    """

    weights: Mapping[tuple, float]
    num_docs: int

    def weight(self, gram: tuple) -> float:
        w = self.weights.get(gram)
        if w is None:
            return math.log(self.num_docs) if self.num_docs > 1 else 0.0
        return w


def build_idf(references_by_doc: Iterable[Sequence[Tokens]]) -> IdfTable:
    doc_freq: Counter = Counter()
    num_docs = 0
    for refs in references_by_doc:
        num_docs += 1
        grams: set[tuple] = set()
        for ref in refs:
            for order in range(1, CIDER_MAX_ORDER + 1):
                grams.update(ngram_counts(ref, order).keys())
        doc_freq.update(grams)
    if num_docs == 0:
        raise MetricError("idf needs at least one document")
    log_n = math.log(num_docs) if num_docs > 1 else 0.0
    weights = {g: log_n - math.log(max(1.0, df)) for g, df in doc_freq.items()}
    return IdfTable(weights, num_docs)


def _tfidf_vector(tokens: Tokens, idf: IdfTable) -> tuple[list[dict], list[float]]:
    vecs: list[dict] = []
    norms: list[float] = []
    for order in range(1, CIDER_MAX_ORDER + 1):
        vec = {g: c * idf.weight(g) for g, c in ngram_counts(tokens, order).items()}
        vecs.append(vec)
        norms.append(math.sqrt(sum(v * v for v in vec.values())))
    return vecs, norms


def cider(candidate: Tokens, references: Sequence[Tokens], idf: IdfTable) -> float:
    """CIDEr score of one candidate against its references (raw, x10 scale).

    Candidate counts are clipped at the reference counts and a Gaussian
    penalty on the token-count difference discounts length mismatches.
    """
    if not references:
        raise MetricError("references must be nonempty")
    cand_vecs, cand_norms = _tfidf_vector(candidate, idf)
    order_sums = [0.0] * CIDER_MAX_ORDER
    for ref in references:
        ref_vecs, ref_norms = _tfidf_vector(ref, idf)
        delta = float(len(candidate) - len(ref))
        penalty = math.exp(-(delta**2) / (2.0 * CIDER_LENGTH_SIGMA**2))
        for k in range(CIDER_MAX_ORDER):
            num = sum(
                min(val, ref_vecs[k].get(gram, 0.0)) * ref_vecs[k].get(gram, 0.0)
                for gram, val in cand_vecs[k].items()
            )
            if cand_norms[k] > 0 and ref_norms[k] > 0:
                order_sums[k] += penalty * num / (cand_norms[k] * ref_norms[k])
    per_order = [s / len(references) for s in order_sums]
    return 10.0 * sum(per_order) / CIDER_MAX_ORDER


# ---------------------------------------------------------------------------
# Fidelity report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FidelityReport:
    bleu_4: float
    cider: float
    spider: float | None


def evaluate_fidelity(
    generated: Mapping[str, Tokens],
    references: Mapping[str, Sequence[Tokens]],
    spice: Mapping[str, float] | None = None,
) -> FidelityReport:
    """Corpus BLEU_4 and mean CIDEr, both reported x100.

    SPIDEr = (CIDEr + SPICE)/2 is emitted only when externally computed SPICE
    scores are supplied; otherwise it is None (unavailable).
    """
    missing = sorted(set(generated) ^ set(references))
    if not generated:
        raise MetricError("no generated captions to evaluate")
    if missing:
        raise MetricError(f"clip ids do not match, offending ids: {missing}")
    idf = build_idf(references[cid] for cid in sorted(references))
    order = sorted(generated)
    bleu = corpus_bleu([generated[c] for c in order], [references[c] for c in order], n=4)
    mean_cider = sum(cider(generated[c], references[c], idf) for c in order) / len(order)
    spider = None
    if spice is not None:
        missing_spice = sorted(set(generated) - set(spice))
        if missing_spice:
            raise MetricError(f"spice scores missing for clips: {missing_spice}")
        mean_spice = sum(spice[c] for c in order) / len(order)
        spider = 100.0 * (mean_cider + mean_spice) / 2.0
    return FidelityReport(bleu_4=bleu, cider=100.0 * mean_cider, spider=spider)


# ---------------------------------------------------------------------------
# Diversity
# ---------------------------------------------------------------------------


def mbleu_n(caption_set: Sequence[Tokens], n: int = 4) -> float:
    """Mutual BLEU_n of a caption set (0-100, lower means more diverse).

    Each caption is scored with smoothed sentence BLEU against the remaining
    set members; the result is the arithmetic mean.
    """
    if len(caption_set) < 2:
        raise MetricError("mBLEU needs at least 2 captions")
    scores = []
    for i, cand in enumerate(caption_set):
        rest = [c for j, c in enumerate(caption_set) if j != i]
        scores.append(bleu_n(cand, rest, n, smooth=True))
    return sum(scores) / len(scores)


def div_n(caption_set: Sequence[Tokens], n: int) -> float:
    """100 x distinct n-grams over total words for a caption set (higher = more diverse)."""
    if not caption_set:
        raise MetricError("div-n needs a nonempty caption set")
    distinct: set[tuple] = set()
    total_words = 0
    for cap in caption_set:
        distinct.update(ngram_counts(cap, n).keys())
        total_words += len(cap)
    if total_words == 0:
        return 0.0
    return 100.0 * len(distinct) / total_words


def vocab_size(captions: Iterable[Tokens]) -> int:
    """Number of distinct content words across a caption collection."""
    words: set[str] = set()
    for cap in captions:
        words.update(cap)
    return len(words)


def ngram_count_ratios(
    train_captions: Sequence[Tokens],
    eval_captions: Sequence[Tokens],
    train_size: int,
    test_size: int,
    max_order: int = 3,
) -> dict[tuple, float]:
    """Observed-over-expected frequency ratio per training n-gram (orders 1..3).

    For an n-gram occurring m times in the training captions the expected
    eval frequency is m * test_size / train_size; n-grams absent from the
    eval captions get ratio 0.
    """
    if train_size <= 0 or test_size <= 0:
        raise MetricError("set sizes must be positive")
    train_counts: Counter = Counter()
    eval_counts: Counter = Counter()
    for cap in train_captions:
        for order in range(1, max_order + 1):
            train_counts.update(ngram_counts(cap, order))
    for cap in eval_captions:
        for order in range(1, max_order + 1):
            eval_counts.update(ngram_counts(cap, order))
    scale = test_size / train_size
    return {
        gram: eval_counts.get(gram, 0) / (m * scale)
        for gram, m in train_counts.items()
    }


def vocab_by_threshold(
    captions: Sequence[Tokens],
    thresholds: Sequence[int],
) -> list[tuple[int, int]]:
    """Vocabulary size at each count threshold: words with frequency > t.

    Thresholds must be sorted ascending; the resulting curve is
    non-increasing.
    """
    if list(thresholds) != sorted(thresholds):
        raise MetricError("thresholds must be sorted ascending")
    freq: Counter = Counter()
    for cap in captions:
        freq.update(cap)
    return [(t, sum(1 for c in freq.values() if c > t)) for t in thresholds]
