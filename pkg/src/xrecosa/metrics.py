"""Automatic reply metrics: BLEU-1..4, ROUGE-1/2/L and Distinct-1/2."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple

from .corpus import tokenize
from .errors import ContractError, FormatError

Tokens = Sequence[str]


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(c: int, refs: Sequence[Tokens]) -> int:
    return min((abs(len(r) - c), len(r)) for r in refs)[1]


def bleu_stats(candidate: Tokens, references: Sequence[Tokens], max_n: int = 4):
    """Clipped match counts and totals per order, plus candidate and closest reference length."""
    matches, totals = [], []
    for n in range(1, max_n + 1):
        cand = ngrams(candidate, n)
        max_ref: Counter = Counter()
        for r in references:
            max_ref |= ngrams(r, n)
        matches.append(sum(min(c, max_ref[g]) for g, c in cand.items()))
        totals.append(max(len(candidate) - n + 1, 0))
    return matches, totals, len(candidate), _closest_ref_len(len(candidate), references)


def corpus_bleu(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]], k: int = 4,
                smooth: bool = True) -> float:
    """Corpus BLEU-k with uniform weights over orders 1..k.

    Orders >= 2 get add-one smoothing when ``smooth`` is set. The brevity penalty
    uses, per sample, the reference length closest to the candidate (shorter on ties).
    """
    if not 1 <= k <= 4:
        raise ValueError(f"BLEU order must be in 1..4, got {k}")
    if len(candidates) != len(references):
        raise ContractError(f"{len(candidates)} candidates vs {len(references)} reference sets")
    num, den = [0] * k, [0] * k
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ContractError("every candidate needs at least one reference")
        m, t, c, r = bleu_stats(cand, refs, k)
        num = [a + b for a, b in zip(num, m)]
        den = [a + b for a, b in zip(den, t)]
        c_len += c
        r_len += r
    if c_len == 0 or num[0] == 0:
        return 0.0
    log_p = 0.0
    for n in range(k):
        if n >= 1 and smooth:
            p = (num[n] + 1) / (den[n] + 1)
        else:
            p = num[n] / den[n] if den[n] else 0.0
        if p == 0:
            return 0.0
        log_p += math.log(p) / k
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_p)


def bleu_k(candidate: Tokens, references: Sequence[Tokens], k: int) -> float:
    return corpus_bleu([candidate], [references], k)


def _f1(overlap: float, n_cand: int, n_ref: int) -> float:
    if overlap == 0 or n_cand == 0 or n_ref == 0:
        return 0.0
    p, r = overlap / n_cand, overlap / n_ref
    return 2 * p * r / (p + r)


def rouge_n(candidate: Tokens, reference: Tokens, n: int) -> float:
    c, r = ngrams(candidate, n), ngrams(reference, n)
    return _f1(sum((c & r).values()), sum(c.values()), sum(r.values()))


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Tokens, reference: Tokens) -> float:
    return _f1(lcs_length(candidate, reference), len(candidate), len(reference))


def rouge(candidate: Tokens, reference: Tokens) -> Tuple[float, float, float]:
    """(ROUGE-1, ROUGE-2, ROUGE-L) F1 of one candidate against one reference."""
    return rouge_n(candidate, reference, 1), rouge_n(candidate, reference, 2), rouge_l(candidate, reference)


def rouge_multi(candidate: Tokens, references: Sequence[Tokens]) -> Tuple[float, float, float]:
    """Per-metric maximum over the references."""
    scores = [rouge(candidate, r) for r in references]
    return tuple(max(s[i] for s in scores) for i in range(3))


def corpus_rouge(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]]):
    """Sample-mean ROUGE; samples whose references are all empty are skipped.

    Returns ``((rouge_1, rouge_2, rouge_l), skipped)``.
    """
    if len(candidates) != len(references):
        raise ContractError(f"{len(candidates)} candidates vs {len(references)} reference sets")
    totals = [0.0, 0.0, 0.0]
    used = skipped = 0
    for cand, refs in zip(candidates, references):
        refs = [r for r in refs if len(r)]
        if not refs:
            skipped += 1
            continue
        for i, s in enumerate(rouge_multi(cand, refs)):
            totals[i] += s
        used += 1
    if used == 0:
        return (0.0, 0.0, 0.0), skipped
    return tuple(t / used for t in totals), skipped


def distinct_k(corpus: Iterable[Tokens], k: int) -> float:
    """Unique k-grams over total k-grams across every reply in the corpus."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    seen, total = set(), 0
    for reply in corpus:
        for i in range(len(reply) - k + 1):
            seen.add(tuple(reply[i: i + k]))
            total += 1
    return len(seen) / total if total else 0.0


@dataclass
class MetricReport:
    bleu_1: float
    bleu_2: float
    bleu_3: float
    bleu_4: float
    rouge_1: float
    rouge_2: float
    rouge_l: float
    distinct_1: float
    distinct_2: float
    samples: int = 0
    tokens: int = 0
    skipped: int = 0

    METRICS = ("bleu_1", "bleu_2", "bleu_3", "bleu_4", "rouge_1", "rouge_2", "rouge_l", "distinct_1", "distinct_2")

    def values(self) -> dict:
        return {m: getattr(self, m) for m in self.METRICS}

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        """``key: value`` lines, metrics as percentages with two decimals."""
        lines = [f"{m}: {100 * v:.2f}" for m, v in self.values().items()]
        lines += [f"samples: {self.samples}", f"tokens: {self.tokens}", f"skipped: {self.skipped}"]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        """Inverse of :meth:`to_text`, up to the two-decimal rounding."""
        kv = dict(line.split(": ", 1) for line in text.splitlines() if ": " in line)
        try:
            vals = [float(kv[m]) / 100 for m in cls.METRICS]
            counts = {k: int(kv[k]) for k in ("samples", "tokens", "skipped") if k in kv}
        except (KeyError, ValueError) as exc:
            raise FormatError(f"not a metric report: {exc}") from None
        return cls(*vals, **counts)


def score_corpus(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]]) -> MetricReport:
    if len(candidates) != len(references):
        raise ContractError(f"{len(candidates)} replies but {len(references)} reference sets")
    bleu_refs = [[r for r in refs if len(r)] or [[]] for refs in references]
    (r1, r2, rl), skipped = corpus_rouge(candidates, references)
    return MetricReport(
        *(corpus_bleu(candidates, bleu_refs, k) for k in range(1, 5)),
        r1, r2, rl,
        distinct_k(candidates, 1), distinct_k(candidates, 2),
        samples=len(candidates), tokens=sum(len(c) for c in candidates), skipped=skipped,
    )


def evaluate_model(model, contexts: Sequence, references: Sequence[Sequence[str]], vocab, cfg=None,
                   replies_path: Optional[str] = None) -> MetricReport:
    """Decode every context and score the replies against their reference strings.

    ``contexts`` are lists of token-id utterances; ``references`` are lists of raw
    reference strings aligned 1:1 with the contexts.
    """
    from .decoding import decode_many

    if len(contexts) != len(references):
        raise ContractError(f"{len(contexts)} contexts but {len(references)} reference sets")
    replies = [vocab.decode(ids) for ids in decode_many(model, contexts, cfg)]
    if replies_path is not None:
        Path(replies_path).write_text("".join(" ".join(r) + "\n" for r in replies), encoding="utf-8")
    return score_corpus(replies, [[tokenize(x) for x in refs] for refs in references])
