"""Evaluation metrics and the significance test used in reports.

BLEU is sentence-level smoothed BLEU-4: modified n-gram precisions with
add-one smoothing on numerator and denominator for n >= 2, geometric mean,
and brevity penalty exp(1 - r/c) for short candidates. Values live in
[0, 1] internally; human-facing tables use the x100 scale.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

SMOOTHING_VARIANT = "add-one on n>=2 precisions"


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# BLEU


def _ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def smoothed_bleu4(candidate, reference) -> float:
    """Sentence-level smoothed BLEU-4 in [0, 1]; empty candidate scores 0."""
    candidate = list(candidate)
    reference = list(reference)
    if not reference:
        raise MetricError("reference must be non-empty")
    if not candidate:
        return 0.0
    log_precision_sum = 0.0
    for n in range(1, 5):
        cand_counts = _ngram_counts(candidate, n)
        ref_counts = _ngram_counts(reference, n)
        matches = sum(min(count, ref_counts[gram]) for gram, count in cand_counts.items())
        total = max(len(candidate) - n + 1, 0)
        if n >= 2:
            matches += 1
            total += 1
        if matches == 0:
            return 0.0
        log_precision_sum += math.log(matches / total)
    geo_mean = math.exp(log_precision_sum / 4.0)
    c, r = len(candidate), len(reference)
    brevity = 1.0 if c >= r else math.exp(1.0 - r / c)
    return brevity * geo_mean


@dataclass
class BleuReport:
    per_example: list[float]
    corpus_mean: float
    per_language: dict[str, float]
    overall: float
    smoothing: str = SMOOTHING_VARIANT

    def scaled(self) -> dict[str, float]:
        out = {lang: 100.0 * v for lang, v in self.per_language.items()}
        out["Overall"] = 100.0 * self.overall
        return out


def bleu_report(candidates, references, languages) -> BleuReport:
    """Per-language means plus their unweighted mean as the overall score."""
    if not (len(candidates) == len(references) == len(languages)):
        raise MetricError("candidates, references and languages must align")
    if not candidates:
        raise MetricError("empty evaluation set")
    scores = [smoothed_bleu4(c, r) for c, r in zip(candidates, references)]
    by_lang: dict[str, list[float]] = {}
    for score, lang in zip(scores, languages):
        by_lang.setdefault(lang, []).append(score)
    per_language = {lang: float(np.mean(vals)) for lang, vals in sorted(by_lang.items())}
    overall = float(np.mean(list(per_language.values())))
    return BleuReport(per_example=scores, corpus_mean=float(np.mean(scores)),
                      per_language=per_language, overall=overall)


# ---------------------------------------------------------------------------
# MRR


@dataclass
class MrrReport:
    per_query: list[float]
    per_language: dict[str, float]
    overall: float

    def scaled(self) -> dict[str, float]:
        out = {lang: 100.0 * v for lang, v in self.per_language.items()}
        out["Overall"] = 100.0 * self.overall
        return out


def mrr(ranked_lists, gold_ids, languages=None) -> MrrReport:
    """Mean reciprocal rank of the gold id inside each ranked candidate list."""
    if len(ranked_lists) != len(gold_ids):
        raise MetricError("ranked_lists and gold_ids must align")
    if not ranked_lists:
        raise MetricError("empty query set")
    if languages is None:
        languages = ["all"] * len(gold_ids)
    per_query = []
    for ranked, gold in zip(ranked_lists, gold_ids):
        ranked = list(ranked)
        if gold not in ranked:
            raise MetricError(f"gold id {gold!r} missing from candidate pool")
        per_query.append(1.0 / (ranked.index(gold) + 1))
    by_lang: dict[str, list[float]] = {}
    for rr, lang in zip(per_query, languages):
        by_lang.setdefault(lang, []).append(rr)
    per_language = {lang: float(np.mean(vals)) for lang, vals in sorted(by_lang.items())}
    overall = float(np.mean(list(per_language.values())))
    return MrrReport(per_query=per_query, per_language=per_language, overall=overall)


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.size == 0:
        raise MetricError("predictions and labels must be non-empty and aligned")
    return float((predictions == labels).mean())


# ---------------------------------------------------------------------------
# one-sided paired t-test


def _beta_continued_fraction(a: float, b: float, x: float) -> float:
    # Lentz's algorithm; converges to ~1e-15 well within 200 iterations
    max_iter, eps, tiny = 200, 3e-16, 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b); documented accuracy 1e-6, observed far better."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: float) -> float:
    """P(T > t) for Student's t with df degrees of freedom."""
    if df <= 0:
        raise MetricError("degrees of freedom must be positive")
    x = df / (df + t * t)
    tail = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, x)
    return tail if t >= 0 else 1.0 - tail


def paired_one_sided_ttest(scores_a, scores_b) -> float:
    """p-value for H1: mean(a - b) > 0, paired samples."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise MetricError("paired scores must be equal-length vectors")
    if a.size < 2:
        raise MetricError("need at least 2 paired scores")
    diffs = a - b
    if np.all(diffs == 0.0):
        raise MetricError("all paired differences are exactly zero; test undefined")
    sd = diffs.std(ddof=1)
    mean = diffs.mean()
    if sd == 0.0:
        return 0.0 if mean > 0 else 1.0
    t = mean / (sd / math.sqrt(diffs.size))
    return student_t_sf(t, diffs.size - 1)


# ---------------------------------------------------------------------------
# report rendering


@dataclass
class LanguageTable:
    """Rows of per-language values rendered with languages as columns and an
    unweighted Overall column last."""

    languages: list[str]
    rows: list[tuple[str, dict[str, float]]] = field(default_factory=list)

    def add_row(self, name: str, values: dict[str, float]):
        missing = [lang for lang in self.languages if lang not in values]
        if missing:
            raise MetricError(f"row {name!r} missing languages {missing}")
        self.rows.append((name, dict(values)))

    def to_markdown(self, scale: float = 100.0, fmt: str = "{:.2f}") -> str:
        header = ["Model"] + list(self.languages) + ["Overall"]
        lines = ["| " + " | ".join(header) + " |",
                 "|" + "---|" * len(header)]
        for name, values in self.rows:
            overall = float(np.mean([values[lang] for lang in self.languages]))
            cells = [fmt.format(scale * values[lang]) for lang in self.languages]
            cells.append(fmt.format(scale * overall))
            lines.append("| " + name + " | " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"

    def to_dict(self, scale: float = 100.0) -> dict:
        out = {}
        for name, values in self.rows:
            row = {lang: scale * values[lang] for lang in self.languages}
            row["Overall"] = scale * float(np.mean([values[lang] for lang in self.languages]))
            out[name] = row
        return out
