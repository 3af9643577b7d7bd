"""chrF / chrF++: character and word n-gram F-scores for translation output."""

from __future__ import annotations

from collections import Counter
from fractions import Fraction


def char_ngrams(text: str, n: int) -> Counter:
    s = "".join(text.split())
    return Counter(s[i : i + n] for i in range(len(s) - n + 1))


def word_ngrams(text: str, n: int) -> Counter:
    w = text.split()
    return Counter(tuple(w[i : i + n]) for i in range(len(w) - n + 1))


def _f_beta(hyp: Counter, ref: Counter, beta2: Fraction) -> Fraction:
    matches = sum((hyp & ref).values())
    if matches == 0:
        return Fraction(0)
    precision = Fraction(matches, sum(hyp.values()))
    recall = Fraction(matches, sum(ref.values()))
    return (1 + beta2) * precision * recall / (beta2 * precision + recall)


def chrf_pp(hypothesis: str, reference: str, char_order: int = 6, word_order: int = 2, beta: float = 2.0) -> float:
    """Sentence-level chrF++ on a 0-100 scale.

    Averages the F-beta of clipped n-gram matches over every order that
    yields at least one n-gram in the hypothesis or the reference. Characters
    are taken with whitespace removed, words by whitespace splitting.
    """
    if char_order < 1 or word_order < 0:
        raise ValueError("char_order must be >= 1 and word_order >= 0")
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    if not reference.strip():
        raise ValueError("reference must contain non-whitespace text")
    beta2 = Fraction(beta) ** 2
    scores = []
    for extract, orders in ((char_ngrams, char_order), (word_ngrams, word_order)):
        for n in range(1, orders + 1):
            h, r = extract(hypothesis, n), extract(reference, n)
            if h or r:
                scores.append(_f_beta(h, r, beta2))
    return float(100 * sum(scores) / len(scores))


def mean_sentence_chrf(hypotheses, references, **kw) -> float:
    """Average of sentence-level scores (not pooled corpus statistics)."""
    hypotheses, references = list(hypotheses), list(references)
    if len(hypotheses) != len(references) or not hypotheses:
        raise ValueError("need the same non-zero number of hypotheses and references")
    return sum(chrf_pp(h, r, **kw) for h, r in zip(hypotheses, references)) / len(hypotheses)
