"""Similarity metrics for scoring emulated shell output against ground truth.

All functions are pure and operate on unicode strings; callers decode bytes
with errors="replace" first (see as_text). Every real-valued metric stays in
[0, 1].
"""

from __future__ import annotations

import difflib
import math
import re
from collections import Counter
from dataclasses import dataclass, field

from . import sanitize

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_TERM_RE = re.compile(r"\w{2,}")

# Success threshold on the cosine / Jaro-Winkler pair, strict inequality.
SUCCESS_THRESHOLD = 0.4


def as_text(value) -> str:
    """Coerce bytes to str, replacing invalid sequences with U+FFFD."""
    if isinstance(value, bytes):
        return value.decode("utf-8", errors="replace")
    return value


def _normalize_exact(text: str) -> str:
    return "\n".join(line.rstrip() for line in text.split("\n")).rstrip("\n")


def exact_match(expected: str, actual: str) -> bool:
    """Equality after trimming per-line trailing whitespace and trailing newlines."""
    return _normalize_exact(expected) == _normalize_exact(actual)


def tokenize(text: str) -> list[str]:
    """Lowercased word-and-punctuation tokens: \\w+ runs, punctuation split singly."""
    return _TOKEN_RE.findall(text.lower())


def token_accuracy(expected: str, actual: str) -> float:
    exp = tokenize(expected)
    act = tokenize(actual)
    if not exp and not act:
        return 1.0
    if not exp or not act:
        return 0.0
    overlap = sum((Counter(exp) & Counter(act)).values())
    return overlap / max(len(exp), len(act))


def _tfidf_vector(doc: Counter, dfs: Counter) -> dict[str, float]:
    vec = {}
    for term, tf in doc.items():
        idf = math.log(3.0 / (1 + dfs[term])) + 1.0
        vec[term] = tf * idf
    norm = math.sqrt(sum(w * w for w in vec.values()))
    if norm == 0.0:
        return {}
    return {t: w / norm for t, w in vec.items()}


def cosine_tfidf(expected: str, actual: str) -> float:
    """Cosine over tf-idf vectors of the two-document corpus {expected, actual}.

    Terms are lowercased runs of >= 2 word characters, tf is the raw count,
    idf(t) = ln((1+n)/(1+df)) + 1 with n = 2, vectors are L2-normalized.
    """
    a = Counter(_TERM_RE.findall(expected.lower()))
    b = Counter(_TERM_RE.findall(actual.lower()))
    dfs = Counter()
    for doc in (a, b):
        dfs.update(set(doc))
    va = _tfidf_vector(a, dfs)
    vb = _tfidf_vector(b, dfs)
    if not va or not vb:
        return 0.0
    return sum(w * vb.get(t, 0.0) for t, w in va.items())


def jaro_winkler(expected: str, actual: str) -> float:
    """Jaro similarity with the Winkler prefix boost (p = 0.1, prefix <= 4)."""
    a, b = expected, actual
    if not a and not b:
        return 1.0
    if not a or not b:
        return 0.0
    # Match window; floor(max/2) - 1 clamped at 0 so identical one-char
    # strings still score 1.0.
    window = max(max(len(a), len(b)) // 2 - 1, 0)
    a_flags = [False] * len(a)
    b_flags = [False] * len(b)
    matches = 0
    for i in range(len(a)):
        lo = max(0, i - window)
        hi = min(len(b), i + window + 1)
        for j in range(lo, hi):
            if not b_flags[j] and a[i] == b[j]:
                a_flags[i] = True
                b_flags[j] = True
                matches += 1
                break
    if matches == 0:
        return 0.0
    a_seq = [ch for ch, hit in zip(a, a_flags) if hit]
    b_seq = [ch for ch, hit in zip(b, b_flags) if hit]
    half_transpositions = sum(1 for x, y in zip(a_seq, b_seq) if x != y)
    t = half_transpositions / 2
    jaro = (matches / len(a) + matches / len(b) + (matches - t) / matches) / 3
    prefix = 0
    for x, y in zip(a[:4], b[:4]):
        if x != y:
            break
        prefix += 1
    return jaro + prefix * 0.1 * (1 - jaro)


def _levenshtein_distance(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def levenshtein_ratio(expected: str, actual: str) -> float:
    """1 - edit_distance / max(len), with 1.0 for two empty strings."""
    if not expected and not actual:
        return 1.0
    return 1.0 - _levenshtein_distance(expected, actual) / max(len(expected), len(actual))


def sequence_ratio(expected: str, actual: str) -> float:
    """Ratcliff-Obershelp ratio, the stdlib SequenceMatcher without autojunk."""
    if not expected and not actual:
        return 1.0
    return difflib.SequenceMatcher(None, expected, actual, autojunk=False).ratio()


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(expected: str, actual: str) -> float:
    """BLEU-4 with single reference and add-epsilon smoothing (eps = 0.1).

    Zero clipped-count numerators are replaced by 0.1; an n-gram order the
    candidate is too short to produce contributes 0.1/1. Brevity penalty is
    1 when the candidate is longer than the reference, else exp(1 - r/c).
    """
    ref = tokenize(expected)
    cand = tokenize(actual)
    if not cand:
        return 0.0
    log_precisions = 0.0
    for n in range(1, 5):
        cand_counts = _ngrams(cand, n)
        ref_counts = _ngrams(ref, n)
        clipped = sum(min(count, ref_counts[gram]) for gram, count in cand_counts.items())
        total = max(sum(cand_counts.values()), 1)
        log_precisions += 0.25 * math.log((clipped or 0.1) / total)
    c, r = len(cand), len(ref)
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(log_precisions)


def hallucination_flag(command: str, actual: str) -> bool:
    """Offline counterpart of the session sanitizer's flagged bit."""
    _, flagged = sanitize.evaluate(command, actual)
    return flagged


@dataclass
class MetricReport:
    """Per-command metric vector for one (expected, actual) output pair."""

    exact: bool
    token_accuracy: float
    cosine_tfidf: float
    jaro_winkler: float
    levenshtein_ratio: float
    sequence_ratio: float
    bleu4: float
    success: bool = field(init=False)
    hallucination: bool = False

    def __post_init__(self):
        self.success = success_flag(self)

    def to_dict(self) -> dict:
        return {
            "exact": self.exact,
            "token_accuracy": self.token_accuracy,
            "cosine_tfidf": self.cosine_tfidf,
            "jaro_winkler": self.jaro_winkler,
            "levenshtein_ratio": self.levenshtein_ratio,
            "sequence_ratio": self.sequence_ratio,
            "bleu4": self.bleu4,
            "success": self.success,
            "hallucination": self.hallucination,
        }


def success_flag(report: MetricReport) -> bool:
    """cosine > 0.4 or Jaro-Winkler > 0.4, both strict."""
    return report.cosine_tfidf > SUCCESS_THRESHOLD or report.jaro_winkler > SUCCESS_THRESHOLD


def score_pair(command: str, expected: str, actual: str, hallucination: bool | None = None) -> MetricReport:
    """Compute the full metric vector for one command's output pair.

    hallucination defaults to re-running the sanitizer rules on `actual`;
    pass the live routing flag instead when `actual` was already sanitized.
    """
    expected = as_text(expected)
    actual = as_text(actual)
    report = MetricReport(
        exact=exact_match(expected, actual),
        token_accuracy=token_accuracy(expected, actual),
        cosine_tfidf=cosine_tfidf(expected, actual),
        jaro_winkler=jaro_winkler(expected, actual),
        levenshtein_ratio=levenshtein_ratio(expected, actual),
        sequence_ratio=sequence_ratio(expected, actual),
        bleu4=bleu4(expected, actual),
    )
    report.hallucination = (
        hallucination_flag(command, actual) if hallucination is None else hallucination
    )
    return report
