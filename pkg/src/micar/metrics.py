"""BLEU-1..4 and ROUGE-L for generated reports."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

from micar.errors import ContractError

ROUGE_BETA2 = 1.2 ** 2


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def clipped_counts(candidate: Sequence[str], reference: Sequence[str], n: int) -> tuple[int, int]:
    """(clipped matches, candidate n-gram total) for order ``n``."""
    cand = ngrams(candidate, n)
    ref = ngrams(reference, n)
    return sum(min(c, ref[g]) for g, c in cand.items()), max(len(candidate) - n + 1, 0)


def _bleu_from_stats(matches: Sequence[int], totals: Sequence[int], cand_len: int, ref_len: int) -> float:
    if cand_len == 0:
        return 0.0
    if any(m == 0 for m in matches):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / len(matches)
    bp = min(1.0, math.exp(1.0 - ref_len / cand_len))
    return bp * math.exp(log_p)


def bleu_n(candidate: Sequence[str], reference: Sequence[str], n: int) -> float:
    """Cumulative BLEU with uniform weights over orders 1..n and brevity penalty."""
    if not 1 <= n <= 4:
        raise ContractError(f"BLEU order must be in 1..4, got {n}")
    stats = [clipped_counts(candidate, reference, i) for i in range(1, n + 1)]
    return _bleu_from_stats([m for m, _ in stats], [t for _, t in stats], len(candidate), len(reference))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str], beta2: float = ROUGE_BETA2) -> float:
    """LCS F-measure ``(1+b²)PR / (R + b²P)``."""
    if not reference:
        raise ContractError("ROUGE-L needs a nonempty reference")
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return (1.0 + beta2) * p * r / (r + beta2 * p)


def average_bleu(values: Sequence):
    """Mean of BLEU-1..4; works on floats or exact ``Fraction``/``Decimal`` inputs."""
    values = list(values)
    if len(values) != 4:
        raise ContractError(f"average BLEU needs 4 values, got {len(values)}")
    return sum(values[1:], values[0]) / 4


@dataclass
class MetricReport:
    bleu_1: float
    bleu_2: float
    bleu_3: float
    bleu_4: float
    avg_bleu: float
    rouge_l: float
    n: int
    per_example: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_corpus(predictions: Mapping[str, Sequence[str]], references: Mapping[str, Sequence[str]]) -> MetricReport:
    """Corpus BLEU (summed clipped counts and lengths) and macro-averaged ROUGE-L.

    Both mappings go from example id to a token list and must cover the same ids.
    """
    missing = sorted(set(references) - set(predictions))
    extra = sorted(set(predictions) - set(references))
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"missing predictions for ids: {', '.join(missing)}")
        if extra:
            parts.append(f"no reference for ids: {', '.join(extra)}")
        raise ContractError("; ".join(parts))
    if not references:
        raise ContractError("cannot evaluate an empty prediction set")
    ids = sorted(references)
    matches = [0] * 4
    totals = [0] * 4
    cand_len = ref_len = 0
    rouge_sum = 0.0
    per_example = {}
    for i in ids:
        cand, ref = list(predictions[i]), list(references[i])
        for n in range(1, 5):
            m, t = clipped_counts(cand, ref, n)
            matches[n - 1] += m
            totals[n - 1] += t
        cand_len += len(cand)
        ref_len += len(ref)
        r = rouge_l(cand, ref)
        rouge_sum += r
        per_example[i] = {f"bleu_{n}": bleu_n(cand, ref, n) for n in range(1, 5)}
        per_example[i]["rouge_l"] = r
    bleus = [_bleu_from_stats(matches[:n], totals[:n], cand_len, ref_len) for n in range(1, 5)]
    return MetricReport(*bleus, average_bleu(bleus), rouge_sum / len(ids), len(ids), per_example)
