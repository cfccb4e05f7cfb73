"""Exact-match span scoring, per-rule accuracy reports, and the ablation driver."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

from .corpus import CandidateMention, Corpus, Span, bio_to_spans
from .errors import DataError
from .rules import Polarity, Rule, RuleSet, match_many


@dataclass(frozen=True)
class SpanScore:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "SpanScore":
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        return cls(precision=precision, recall=recall, f1=f1, tp=tp, fp=fp, fn=fn)


def span_f1_from_spans(pred: Sequence[Sequence[Span]],
                       gold: Sequence[Sequence[Span]]) -> SpanScore:
    """Micro precision/recall/F1 over exact (start, end, label) matches."""
    if len(pred) != len(gold):
        raise DataError(f"prediction/gold length mismatch: {len(pred)} vs {len(gold)}")
    tp = fp = fn = 0
    for p_spans, g_spans in zip(pred, gold):
        p_set, g_set = set(p_spans), set(g_spans)
        tp += len(p_set & g_set)
        fp += len(p_set - g_set)
        fn += len(g_set - p_set)
    return SpanScore.from_counts(tp, fp, fn)


def span_f1(pred_bio: Sequence[Sequence[str]],
            gold: Sequence[Sequence[Span]]) -> SpanScore:
    return span_f1_from_spans([bio_to_spans(tags) for tags in pred_bio], gold)


# ---------------------------------------------------------------------------
# Rule accuracy report


@dataclass(frozen=True)
class RuleReportRow:
    rule: Rule
    n_matches: int
    n_correct: int

    @property
    def accuracy(self) -> Optional[float]:
        return self.n_correct / self.n_matches if self.n_matches else None


@dataclass
class RuleReport:
    rows: list[RuleReportRow]
    mode: str

    def kind_summary(self) -> dict[str, tuple[int, int]]:
        """Per rule kind: (total matches, total correct) over covered rules."""
        out: dict[str, tuple[int, int]] = {}
        for row in self.rows:
            kind = row.rule.kind.value
            matches, correct = out.get(kind, (0, 0))
            out[kind] = (matches + row.n_matches, correct + row.n_correct)
        return out


def _mention_correct(rule: Rule, m: CandidateMention, gold: Sequence[Span],
                     mode: str) -> bool:
    if rule.polarity is Polarity.NEGATIVE:
        # a negative rule claims O: correct when no gold span covers any token
        return not any(s < m.end and m.start < e for s, e, _ in gold)
    if mode == "exact":
        return (m.start, m.end, rule.label) in set(gold)
    if mode == "overlap":
        return any(s <= m.start and m.end <= e for s, e, lab in gold if lab == rule.label)
    raise DataError(f"unknown rule-report mode {mode!r} (expected 'exact' or 'overlap')")


def rule_accuracy_report(rules: RuleSet, dev: Corpus,
                         mentions: Sequence[CandidateMention],
                         mode: str = "exact") -> RuleReport:
    """Match every rule over dev mentions and score against dev gold spans.

    mode='exact' counts a match correct only on exact span+label equality;
    mode='overlap' accepts matches fully inside a gold span of the label.
    """
    if mode not in ("exact", "overlap"):
        raise DataError(f"unknown rule-report mode {mode!r} (expected 'exact' or 'overlap')")
    all_matches = match_many(rules.rules, dev, mentions)
    rows = []
    for rule, matched in zip(rules.rules, all_matches):
        correct = 0
        for m in matched:
            gold = dev.sentence(m.doc, m.sent).gold_spans or ()
            if _mention_correct(rule, m, gold, mode):
                correct += 1
        rows.append(RuleReportRow(rule=rule, n_matches=len(matched), n_correct=correct))
    return RuleReport(rows=rows, mode=mode)


def save_rule_report(report: RuleReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("kind\tkey\tlabel\tpolarity\tmatches\tcorrect\taccuracy\n")
        for row in report.rows:
            acc = "" if row.accuracy is None else f"{row.accuracy:.4f}"
            fh.write(f"{row.rule.kind.value}\t{row.rule.key}\t{row.rule.label}\t"
                     f"{row.rule.polarity.value}\t{row.n_matches}\t{row.n_correct}\t{acc}\n")


# ---------------------------------------------------------------------------
# Cumulative ablation


def run_ablation(plan: Sequence[str], config: "PipelineConfig",  # noqa: F821
                 out_csv: Optional[str] = None) -> list[tuple[str, SpanScore]]:
    """One full pipeline run per prefix of the plan (baseline row first).

    Row 0 disables every rule kind (seed rules only); row i enables the
    first i kinds of the plan.  Scores are the generative model's span F1
    on the test corpus.
    """
    from . import pipeline  # deferred: pipeline imports this module

    rows: list[tuple[str, SpanScore]] = []
    for i in range(len(plan) + 1):
        enabled = list(plan[:i])
        label = "baseline" if i == 0 else "+" + plan[i - 1]
        sub = pipeline.config_with_kinds(config, enabled, subdir=f"ablation_{i:02d}")
        pipeline.run_pipeline(sub, "extract")
        pipeline.run_pipeline(sub, "graph")
        pipeline.run_pipeline(sub, "propagate")
        pipeline.run_pipeline(sub, "select")
        pipeline.run_pipeline(sub, "apply")
        pipeline.run_pipeline(sub, "fit-label-model")
        score = pipeline.generative_test_score(sub)
        rows.append((label, score))
    if out_csv is not None:
        with open(out_csv, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "precision", "recall", "f1", "tp", "fp", "fn"])
            for label, score in rows:
                writer.writerow([label, f"{score.precision:.6f}", f"{score.recall:.6f}",
                                 f"{score.f1:.6f}", score.tp, score.fp, score.fn])
    return rows
