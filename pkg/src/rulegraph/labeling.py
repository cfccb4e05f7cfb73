"""Token-level vote matrix and adjacency link votes.

The matrix is sparse: a cell (global token, rule) holds the rule's vote
("O" or an entity label); absent cells are ABSTAIN.  Positive rules vote
their label on every token of each matched mention, negative rules vote O.

Link votes are an external signal on adjacent token pairs: LINK claims the
pair shares a tag, BREAK claims it does not.  One TSV file carries one
link source; the pair (r-1, r) is addressed by the right token's 0-based
index r.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

from .corpus import CandidateMention, Corpus
from .errors import DataError
from .rules import Rule, RuleSet, match_many

LINK = "LINK"
BREAK = "BREAK"


@dataclass
class LabelMatrix:
    corpus: Corpus
    rules: list[Rule]
    votes: dict[tuple[int, int], str] = field(default_factory=dict)

    def vote_count(self) -> int:
        return len(self.votes)

    def votes_for_token(self, g: int) -> list[tuple[int, str]]:
        # kept simple; bulk access goes through by_sentence()
        return sorted((j, v) for (tok, j), v in self.votes.items() if tok == g)

    def by_sentence(self) -> Iterator[tuple[int, int, list[list[tuple[int, str]]]]]:
        """Yield (doc, sent, votes-per-token) in corpus order."""
        grouped: dict[int, list[tuple[int, str]]] = {}
        for (g, j), vote in self.votes.items():
            grouped.setdefault(g, []).append((j, vote))
        for doc_i, sent_i, sentence in self.corpus.sentences():
            base = self.corpus.sentence_offset(doc_i, sent_i)
            per_token = [sorted(grouped.get(base + t, []))
                         for t in range(len(sentence.tokens))]
            yield doc_i, sent_i, per_token


def apply_rules(rules: RuleSet, corpus: Corpus,
                mentions: Sequence[CandidateMention]) -> LabelMatrix:
    """Match every rule against the mentions and vote on all covered tokens."""
    matrix = LabelMatrix(corpus=corpus, rules=list(rules.rules))
    all_matches = match_many(rules.rules, corpus, mentions)
    for j, (rule, matched) in enumerate(zip(rules.rules, all_matches)):
        vote = rule.vote
        for m in matched:
            base = corpus.sentence_offset(m.doc, m.sent)
            for t in range(m.start, m.end):
                matrix.votes[(base + t, j)] = vote
    return matrix


def save_label_matrix(matrix: LabelMatrix, path: str) -> None:
    rows = []
    for (g, j), vote in matrix.votes.items():
        rows.append((g, j, vote))
    rows.sort()
    with open(path, "w", encoding="utf-8") as fh:
        for g, j, vote in rows:
            doc, sent, tok = _locate(matrix.corpus, g)
            fh.write(f"{doc}\t{sent}\t{tok}\t{j}\t{vote}\n")


def _locate(corpus: Corpus, g: int) -> tuple[int, int, int]:
    for doc_i, sent_i, sentence in corpus.sentences():
        base = corpus.sentence_offset(doc_i, sent_i)
        if base <= g < base + len(sentence.tokens):
            return doc_i, sent_i, g - base
    raise DataError(f"global token index {g} out of range")


def load_label_matrix(path: str, corpus: Corpus, rules: Sequence[Rule]) -> LabelMatrix:
    matrix = LabelMatrix(corpus=corpus, rules=list(rules))
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 5:
                raise DataError(f"{path}:{lineno}: expected 5 columns, got {len(cols)}")
            try:
                doc, sent, tok, j = (int(c) for c in cols[:4])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer coordinates") from None
            if not 0 <= j < len(rules):
                raise DataError(f"{path}:{lineno}: rule index {j} out of range")
            g = corpus.global_index(doc, sent, tok)
            matrix.votes[(g, j)] = cols[4]
    return matrix


# ---------------------------------------------------------------------------
# Link votes


@dataclass
class LinkVoteTable:
    """One link source: votes on adjacent pairs, keyed by the right token."""

    corpus: Corpus
    votes: dict[tuple[int, int, int], str] = field(default_factory=dict)

    def vote(self, doc: int, sent: int, right: int) -> Optional[str]:
        return self.votes.get((doc, sent, right))


def load_link_votes(path: str, corpus: Corpus) -> LinkVoteTable:
    table = LinkVoteTable(corpus=corpus)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 columns, got {len(cols)}")
            try:
                doc, sent, right = (int(c) for c in cols[:3])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer pair coordinates") from None
            if cols[3] not in (LINK, BREAK):
                raise DataError(f"{path}:{lineno}: vote must be LINK or BREAK, got {cols[3]!r}")
            n = len(corpus.sentence(doc, sent).tokens)
            if not 1 <= right < n:
                raise DataError(
                    f"{path}:{lineno}: right token index {right} out of range "
                    f"for sentence of length {n}"
                )
            key = (doc, sent, right)
            if key in table.votes:
                raise DataError(f"{path}:{lineno}: duplicate link vote for pair {key}")
            table.votes[key] = cols[3]
    return table


def save_link_votes(table: LinkVoteTable, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for (doc, sent, right), vote in sorted(table.votes.items()):
            fh.write(f"{doc}\t{sent}\t{right}\t{vote}\n")
