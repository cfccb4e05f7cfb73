"""Labeling rules over candidate mentions.

A rule is (kind, key, entity label, polarity).  Positive rules vote their
label on every token of a matched mention; negative rules vote O.  Keys
are case-folded, with multi-token payloads joined by "_".

Kinds:
  surface        full mention text
  prefix/suffix  leading/trailing m characters of a single-token mention
  prengram_in    leading n tokens of the mention
  prengram_ex    n tokens immediately left of the mention
  postngram_in   trailing n tokens of the mention
  postngram_ex   n tokens immediately right of the mention
  dep_first      incoming arc label of the first token + last token text
  dep_secondlast incoming arc label of the second-last token + last token text

Dependency kinds apply to multi-token mentions only; their keys join the
arc label and the token with "_" and are split back on the first "_"
(tokens containing "_" may therefore alias, which we accept).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, Optional, Sequence

from .corpus import CandidateMention, Corpus
from .errors import DataError


class RuleKind(str, Enum):
    SURFACE = "surface"
    PREFIX = "prefix"
    SUFFIX = "suffix"
    PRE_NGRAM_IN = "prengram_in"
    PRE_NGRAM_EX = "prengram_ex"
    POST_NGRAM_IN = "postngram_in"
    POST_NGRAM_EX = "postngram_ex"
    DEP_FIRST = "dep_first"
    DEP_SECOND_LAST = "dep_secondlast"


class Polarity(str, Enum):
    POSITIVE = "pos"
    NEGATIVE = "neg"


@dataclass(frozen=True)
class Rule:
    kind: RuleKind
    key: str
    label: str
    polarity: Polarity = Polarity.POSITIVE

    def __post_init__(self) -> None:
        if not self.key:
            raise DataError("rule key must be non-empty")
        if "\t" in self.key or "\n" in self.key:
            raise DataError(f"rule key {self.key!r} contains tab or newline")
        if not self.label:
            raise DataError("rule label must be non-empty")

    @property
    def vote(self) -> str:
        return self.label if self.polarity is Polarity.POSITIVE else "O"


@dataclass(frozen=True)
class RuleExtractionConfig:
    m_range: tuple[int, int] = (3, 6)
    n_range: tuple[int, int] = (1, 3)
    min_support: int = 2

    def __post_init__(self) -> None:
        if not 1 <= self.m_range[0] <= self.m_range[1]:
            raise DataError(f"bad affix length range {self.m_range}")
        if not 1 <= self.n_range[0] <= self.n_range[1]:
            raise DataError(f"bad n-gram range {self.n_range}")
        if self.min_support < 1:
            raise DataError(f"min_support must be >= 1, got {self.min_support}")


class RuleSet:
    """Ordered rules plus, for each rule, the mentions it matched."""

    def __init__(self) -> None:
        self.rules: list[Rule] = []
        self.matches: list[list[CandidateMention]] = []
        self._index: dict[Rule, int] = {}

    def __len__(self) -> int:
        return len(self.rules)

    def __iter__(self) -> Iterator[Rule]:
        return iter(self.rules)

    def __contains__(self, rule: Rule) -> bool:
        return rule in self._index

    def add(self, rule: Rule, matches: Iterable[CandidateMention] = ()) -> None:
        if rule in self._index:
            raise DataError(f"duplicate rule ({rule.kind.value}, {rule.key!r}, {rule.label}, {rule.polarity.value})")
        self._index[rule] = len(self.rules)
        self.rules.append(rule)
        self.matches.append(list(matches))

    def matches_for(self, rule: Rule) -> list[CandidateMention]:
        return self.matches[self._index[rule]]

    def union(self, other: "RuleSet") -> "RuleSet":
        merged = RuleSet()
        for rs in (self, other):
            for rule, matches in zip(rs.rules, rs.matches):
                if rule not in merged:
                    merged.add(rule, matches)
        return merged


# ---------------------------------------------------------------------------
# Extraction

def _mention_tokens(corpus: Corpus, m: CandidateMention) -> tuple:
    return corpus.sentence(m.doc, m.sent).tokens


def _join(words: Sequence[str]) -> str:
    return "_".join(w.lower() for w in words)


def _safe_key(key: str) -> bool:
    return bool(key) and "\t" not in key and "\n" not in key


def _candidate_keys(corpus: Corpus, m: CandidateMention,
                    cfg: RuleExtractionConfig) -> Iterator[tuple[RuleKind, str]]:
    tokens = _mention_tokens(corpus, m)
    span = [t.text for t in tokens[m.start:m.end]]
    yield RuleKind.SURFACE, _join(span)

    if len(span) == 1:
        word = span[0].lower()
        for length in range(cfg.m_range[0], cfg.m_range[1] + 1):
            if length > len(word):
                break
            yield RuleKind.PREFIX, word[:length]
            yield RuleKind.SUFFIX, word[-length:]

    n_lo, n_hi = cfg.n_range
    for n in range(n_lo, n_hi + 1):
        if n <= len(span):
            yield RuleKind.PRE_NGRAM_IN, _join(span[:n])
            yield RuleKind.POST_NGRAM_IN, _join(span[-n:])
        if m.start - n >= 0:
            yield RuleKind.PRE_NGRAM_EX, _join([t.text for t in tokens[m.start - n:m.start]])
        if m.end + n <= len(tokens):
            yield RuleKind.POST_NGRAM_EX, _join([t.text for t in tokens[m.end:m.end + n]])

    if len(span) > 1:
        last = span[-1].lower()
        first_dep = tokens[m.start].dep_label
        second_last_dep = tokens[m.end - 2].dep_label
        if first_dep:
            yield RuleKind.DEP_FIRST, f"{first_dep.lower()}_{last}"
        if second_last_dep:
            yield RuleKind.DEP_SECOND_LAST, f"{second_last_dep.lower()}_{last}"


def extract_candidate_rules(corpus: Corpus, mentions: Sequence[CandidateMention],
                            cfg: RuleExtractionConfig, label: str) -> RuleSet:
    """Generate every candidate rule the mentions support.

    Rules matched by fewer than cfg.min_support distinct mentions are
    dropped.  Output order is (kind, key), so extraction is deterministic
    regardless of mention order.
    """
    support: dict[tuple[RuleKind, str], dict[tuple[int, int, int, int], CandidateMention]] = {}
    for m in mentions:
        for kind, key in _candidate_keys(corpus, m, cfg):
            if not _safe_key(key):
                continue
            support.setdefault((kind, key), {})[(m.doc, m.sent, m.start, m.end)] = m
    out = RuleSet()
    for (kind, key) in sorted(support, key=lambda kk: (kk[0].value, kk[1])):
        by_span = support[(kind, key)]
        if len(by_span) < cfg.min_support:
            continue
        matched = sorted(by_span.values(), key=lambda m: (m.doc, m.sent, m.start, m.end))
        out.add(Rule(kind=kind, key=key, label=label), matched)
    return out


# ---------------------------------------------------------------------------
# Matching

def _ngram_token_count(key: str) -> int:
    return key.count("_") + 1


def _matches_mention(rule: Rule, corpus: Corpus, m: CandidateMention) -> bool:
    tokens = _mention_tokens(corpus, m)
    span = [t.text.lower() for t in tokens[m.start:m.end]]
    kind = rule.kind
    if kind is RuleKind.SURFACE:
        return "_".join(span) == rule.key
    if kind in (RuleKind.PREFIX, RuleKind.SUFFIX):
        if len(span) != 1:
            return False
        word = span[0]
        return word.startswith(rule.key) if kind is RuleKind.PREFIX else word.endswith(rule.key)
    if kind in (RuleKind.PRE_NGRAM_IN, RuleKind.POST_NGRAM_IN):
        n = _ngram_token_count(rule.key)
        if n > len(span):
            return False
        part = span[:n] if kind is RuleKind.PRE_NGRAM_IN else span[-n:]
        return "_".join(part) == rule.key
    if kind is RuleKind.PRE_NGRAM_EX:
        n = _ngram_token_count(rule.key)
        if m.start - n < 0:
            return False
        return _join([t.text for t in tokens[m.start - n:m.start]]) == rule.key
    if kind is RuleKind.POST_NGRAM_EX:
        n = _ngram_token_count(rule.key)
        if m.end + n > len(tokens):
            return False
        return _join([t.text for t in tokens[m.end:m.end + n]]) == rule.key
    if kind in (RuleKind.DEP_FIRST, RuleKind.DEP_SECOND_LAST):
        if len(span) < 2:
            return False
        # rebuild the key rather than parse it: dep labels may contain "_"
        pos = m.start if kind is RuleKind.DEP_FIRST else m.end - 2
        dep = tokens[pos].dep_label
        return dep is not None and f"{dep.lower()}_{span[-1]}" == rule.key
    raise DataError(f"unknown rule kind {kind!r}")


def match_rule(rule: Rule, corpus: Corpus,
               mentions: Sequence[CandidateMention]) -> list[CandidateMention]:
    """Mentions the rule matches, in input order."""
    return [m for m in mentions if _matches_mention(rule, corpus, m)]


def match_many(rules: Sequence[Rule], corpus: Corpus,
               mentions: Sequence[CandidateMention]) -> list[list[CandidateMention]]:
    """Batch form of match_rule with shared per-mention precomputation.

    Exact-key kinds go through dictionaries; prefix/suffix rules scan the
    single-token mentions.
    """
    single: list[tuple[str, CandidateMention]] = []
    by_surface: dict[str, list[CandidateMention]] = {}
    by_gram: dict[tuple[RuleKind, str], list[CandidateMention]] = {}
    by_dep: dict[tuple[RuleKind, str], list[CandidateMention]] = {}
    gram_ns = sorted({_ngram_token_count(r.key) for r in rules
                      if r.kind in (RuleKind.PRE_NGRAM_IN, RuleKind.POST_NGRAM_IN,
                                    RuleKind.PRE_NGRAM_EX, RuleKind.POST_NGRAM_EX)})
    for m in mentions:
        tokens = _mention_tokens(corpus, m)
        span = [t.text.lower() for t in tokens[m.start:m.end]]
        by_surface.setdefault("_".join(span), []).append(m)
        if len(span) == 1:
            single.append((span[0], m))
        for n in gram_ns:
            if n <= len(span):
                by_gram.setdefault((RuleKind.PRE_NGRAM_IN, "_".join(span[:n])), []).append(m)
                by_gram.setdefault((RuleKind.POST_NGRAM_IN, "_".join(span[-n:])), []).append(m)
            if m.start - n >= 0:
                key = _join([t.text for t in tokens[m.start - n:m.start]])
                by_gram.setdefault((RuleKind.PRE_NGRAM_EX, key), []).append(m)
            if m.end + n <= len(tokens):
                key = _join([t.text for t in tokens[m.end:m.end + n]])
                by_gram.setdefault((RuleKind.POST_NGRAM_EX, key), []).append(m)
        if len(span) > 1:
            for kind, pos in ((RuleKind.DEP_FIRST, m.start), (RuleKind.DEP_SECOND_LAST, m.end - 2)):
                dep = tokens[pos].dep_label
                if dep:
                    by_dep.setdefault((kind, f"{dep.lower()}_{span[-1]}"), []).append(m)

    out: list[list[CandidateMention]] = []
    for rule in rules:
        if rule.kind is RuleKind.SURFACE:
            out.append(list(by_surface.get(rule.key, ())))
        elif rule.kind is RuleKind.PREFIX:
            out.append([m for word, m in single if word.startswith(rule.key)])
        elif rule.kind is RuleKind.SUFFIX:
            out.append([m for word, m in single if word.endswith(rule.key)])
        elif rule.kind in (RuleKind.DEP_FIRST, RuleKind.DEP_SECOND_LAST):
            out.append(list(by_dep.get((rule.kind, rule.key), ())))
        else:
            out.append(list(by_gram.get((rule.kind, rule.key), ())))
    return out


# ---------------------------------------------------------------------------
# Seed-rule TSV: KIND<TAB>KEY<TAB>LABEL<TAB>POLARITY, '#' comments

_KIND_BY_NAME = {k.value: k for k in RuleKind}
_POLARITY_BY_NAME = {p.value: p for p in Polarity}


def load_seed_rules(path: str) -> RuleSet:
    seeds = RuleSet()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 tab-separated columns, got {len(cols)}")
            kind_s, key, label, polarity_s = cols
            if kind_s not in _KIND_BY_NAME:
                raise DataError(f"{path}:{lineno}: unknown rule kind {kind_s!r}")
            if polarity_s not in _POLARITY_BY_NAME:
                raise DataError(f"{path}:{lineno}: unknown polarity {polarity_s!r}")
            try:
                rule = Rule(kind=_KIND_BY_NAME[kind_s], key=key, label=label,
                            polarity=_POLARITY_BY_NAME[polarity_s])
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if rule in seeds:
                raise DataError(f"{path}:{lineno}: duplicate rule ({kind_s}, {key!r}, {label}, {polarity_s})")
            seeds.add(rule)
    return seeds


def save_rules(rules: Iterable[Rule], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rule in rules:
            fh.write(f"{rule.kind.value}\t{rule.key}\t{rule.label}\t{rule.polarity.value}\n")
