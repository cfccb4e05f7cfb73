"""Tokenized corpora, BIO span handling, and candidate-mention extraction.

A corpus is an ordered list of documents; each document is an ordered list
of sentences of tokens carrying text, POS tag, and an optional incoming
dependency arc (head index within the sentence plus arc label).  Gold
entity spans are token ranges with exclusive ends.

Two on-disk forms are supported: JSONL (one document per line) and a
CoNLL-style TSV (one token per line, blank line between sentences).
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

from .errors import DataError

Span = tuple[int, int, str]


@dataclass(frozen=True)
class Token:
    text: str
    pos: str
    dep_head: Optional[int] = None
    dep_label: Optional[str] = None


@dataclass(frozen=True)
class Sentence:
    tokens: tuple[Token, ...]
    gold_spans: Optional[tuple[Span, ...]] = None

    def __post_init__(self) -> None:
        n = len(self.tokens)
        if n == 0:
            raise DataError("empty sentence")
        for tok_i, tok in enumerate(self.tokens):
            if tok.text == "":
                raise DataError(f"token {tok_i} has empty text")
            if tok.dep_head is not None:
                if not 0 <= tok.dep_head < n:
                    raise DataError(f"token {tok.text!r} has dep head "
                                    f"{tok.dep_head} outside sentence of length {n}")
                if tok.dep_head == tok_i:
                    raise DataError(f"token {tok.text!r} is its own dep head")
        if self.gold_spans is not None:
            for start, end, label in self.gold_spans:
                if not (0 <= start < end <= n):
                    raise DataError(f"span ({start},{end}) outside sentence of length {n}")
                if not label:
                    raise DataError(f"span ({start},{end}) has empty label")


@dataclass
class Corpus:
    """Immutable-by-convention container; documents are (doc_id, sentences)."""

    documents: tuple[tuple[str, tuple[Sentence, ...]], ...]
    _offsets: dict[tuple[int, int], int] = field(init=False, repr=False)
    _sentence_index: list[tuple[int, int]] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        offsets: dict[tuple[int, int], int] = {}
        order: list[tuple[int, int]] = []
        g = 0
        for doc_i, (_, sentences) in enumerate(self.documents):
            for sent_i, sentence in enumerate(sentences):
                offsets[(doc_i, sent_i)] = g
                order.append((doc_i, sent_i))
                g += len(sentence.tokens)
        self._offsets = offsets
        self._sentence_index = order
        self._token_count = g

    @property
    def token_count(self) -> int:
        return self._token_count

    def sentences(self) -> Iterator[tuple[int, int, Sentence]]:
        for doc_i, sent_i in self._sentence_index:
            yield doc_i, sent_i, self.documents[doc_i][1][sent_i]

    def sentence(self, doc_i: int, sent_i: int) -> Sentence:
        try:
            return self.documents[doc_i][1][sent_i]
        except IndexError:
            raise DataError(f"no sentence doc={doc_i} sent={sent_i}") from None

    def sentence_offset(self, doc_i: int, sent_i: int) -> int:
        try:
            return self._offsets[(doc_i, sent_i)]
        except KeyError:
            raise DataError(f"no sentence doc={doc_i} sent={sent_i}") from None

    def global_index(self, doc_i: int, sent_i: int, tok_i: int) -> int:
        base = self.sentence_offset(doc_i, sent_i)
        n = len(self.sentence(doc_i, sent_i).tokens)
        if not 0 <= tok_i < n:
            raise DataError(
                f"token index {tok_i} out of range for doc={doc_i} sent={sent_i} (len {n})"
            )
        return base + tok_i


def _validate_sentence(tokens: list[Token], spans: Optional[list[Span]], where: str) -> Sentence:
    n = len(tokens)
    if n == 0:
        raise DataError(f"{where}: empty sentence")
    for tok_i, tok in enumerate(tokens):
        if tok.text == "":
            raise DataError(f"{where}: token {tok_i} has empty text")
        if tok.dep_head is not None:
            if not 0 <= tok.dep_head < n:
                raise DataError(
                    f"{where}: token {tok.text!r} has dep head {tok.dep_head} "
                    f"outside sentence of length {n}"
                )
            if tok.dep_head == tok_i:
                raise DataError(f"{where}: token {tok.text!r} is its own dep head")
    norm: Optional[tuple[Span, ...]] = None
    if spans is not None:
        for start, end, label in spans:
            if not (0 <= start < end <= n):
                raise DataError(f"{where}: span ({start},{end}) outside sentence of length {n}")
            if not label:
                raise DataError(f"{where}: span ({start},{end}) has empty label")
        norm = tuple(sorted(spans, key=lambda s: (s[0], s[1], s[2])))
    return Sentence(tokens=tuple(tokens), gold_spans=norm)


# ---------------------------------------------------------------------------
# JSONL form


def load_corpus_jsonl(path: str) -> Corpus:
    documents = []
    seen_ids: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            documents.append(_parse_document(record, f"{path}:{lineno}", seen_ids))
    return Corpus(documents=tuple(documents))


def _parse_document(record: object, where: str, seen_ids: set[str]) -> tuple[str, tuple[Sentence, ...]]:
    if not isinstance(record, dict):
        raise DataError(f"{where}: document must be an object")
    unknown = set(record) - {"id", "sentences"}
    if unknown:
        raise DataError(f"{where}: unknown document keys {sorted(unknown)}")
    doc_id = record.get("id")
    if not isinstance(doc_id, str) or not doc_id:
        raise DataError(f"{where}: missing or empty document id")
    if doc_id in seen_ids:
        raise DataError(f"{where}: duplicate document id {doc_id!r}")
    seen_ids.add(doc_id)
    raw_sentences = record.get("sentences")
    if not isinstance(raw_sentences, list) or not raw_sentences:
        raise DataError(f"{where}: document {doc_id!r} has no sentences")
    sentences = []
    for sent_i, raw in enumerate(raw_sentences):
        sub = f"{where} doc {doc_id!r} sentence {sent_i}"
        if not isinstance(raw, dict):
            raise DataError(f"{sub}: sentence must be an object")
        unknown = set(raw) - {"tokens", "spans"}
        if unknown:
            raise DataError(f"{sub}: unknown sentence keys {sorted(unknown)}")
        raw_tokens = raw.get("tokens")
        if not isinstance(raw_tokens, list):
            raise DataError(f"{sub}: missing token list")
        tokens = []
        for tok_i, rt in enumerate(raw_tokens):
            if not isinstance(rt, dict) or "t" not in rt or "p" not in rt:
                raise DataError(f"{sub}: token {tok_i} must carry 't' and 'p'")
            unknown = set(rt) - {"t", "p", "h", "d"}
            if unknown:
                raise DataError(f"{sub}: token {tok_i} has unknown keys {sorted(unknown)}")
            head = rt.get("h")
            dep = rt.get("d")
            if head is not None and not isinstance(head, int):
                raise DataError(f"{sub}: token {tok_i} head must be int or null")
            tokens.append(Token(text=str(rt["t"]), pos=str(rt["p"]), dep_head=head,
                                dep_label=None if dep is None else str(dep)))
        spans: Optional[list[Span]] = None
        if "spans" in raw:
            raw_spans = raw["spans"]
            if not isinstance(raw_spans, list):
                raise DataError(f"{sub}: spans must be a list")
            spans = []
            for rs in raw_spans:
                if (not isinstance(rs, list) or len(rs) != 3
                        or not isinstance(rs[0], int) or not isinstance(rs[1], int)):
                    raise DataError(f"{sub}: span must be [start, end, label]")
                spans.append((rs[0], rs[1], str(rs[2])))
        sentences.append(_validate_sentence(tokens, spans, sub))
    return doc_id, tuple(sentences)


def save_corpus_jsonl(corpus: Corpus, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc_id, sentences in corpus.documents:
            record = {"id": doc_id, "sentences": []}
            for sentence in sentences:
                sent_obj: dict = {"tokens": []}
                for tok in sentence.tokens:
                    tok_obj: dict = {"t": tok.text, "p": tok.pos}
                    if tok.dep_head is not None:
                        tok_obj["h"] = tok.dep_head
                    if tok.dep_label is not None:
                        tok_obj["d"] = tok.dep_label
                    sent_obj["tokens"].append(tok_obj)
                if sentence.gold_spans is not None:
                    sent_obj["spans"] = [[s, e, lab] for s, e, lab in sentence.gold_spans]
                record["sentences"].append(sent_obj)
            fh.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")


# ---------------------------------------------------------------------------
# CoNLL-style TSV form: TEXT<TAB>POS<TAB>HEAD<TAB>DEPREL[<TAB>BIO]
# "_" marks an absent head or arc label; heads are 0-based within the sentence.


def load_corpus_conll(path: str, doc_id: str = "doc_000") -> Corpus:
    sentences: list[Sentence] = []
    tokens: list[Token] = []
    bio: list[Optional[str]] = []
    start_line = 1

    def flush(lineno: int) -> None:
        nonlocal tokens, bio, start_line
        if not tokens:
            return
        tags = [b for b in bio if b is not None]
        if tags and len(tags) != len(tokens):
            raise DataError(f"{path}:{start_line}: sentence mixes tagged and untagged lines")
        spans = bio_to_spans(tags) if tags else None
        sentences.append(_validate_sentence(tokens, spans, f"{path}:{start_line}"))
        tokens, bio = [], []
        start_line = lineno + 1

    with open(path, encoding="utf-8") as fh:
        lineno = 0
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                flush(lineno)
                continue
            cols = line.split("\t")
            if len(cols) not in (4, 5):
                raise DataError(f"{path}:{lineno}: expected 4 or 5 tab-separated columns, got {len(cols)}")
            text, pos, head_s, dep_s = cols[:4]
            head: Optional[int]
            if head_s == "_":
                head = None
            else:
                try:
                    head = int(head_s)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: bad head index {head_s!r}") from None
            dep = None if dep_s == "_" else dep_s
            tokens.append(Token(text=text, pos=pos, dep_head=head, dep_label=dep))
            bio.append(cols[4] if len(cols) == 5 else None)
        flush(lineno + 1)
    if not sentences:
        raise DataError(f"{path}: no sentences")
    return Corpus(documents=((doc_id, tuple(sentences)),))


def save_corpus_conll(corpus: Corpus, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        first = True
        for _, _, sentence in corpus.sentences():
            if not first:
                fh.write("\n")
            first = False
            tags = spans_to_bio(len(sentence.tokens), sentence.gold_spans) \
                if sentence.gold_spans is not None else None
            for tok_i, tok in enumerate(sentence.tokens):
                cols = [tok.text, tok.pos,
                        "_" if tok.dep_head is None else str(tok.dep_head),
                        "_" if tok.dep_label is None else tok.dep_label]
                if tags is not None:
                    cols.append(tags[tok_i])
                fh.write("\t".join(cols))
                fh.write("\n")


def load_corpus(path: str, fmt: str) -> Corpus:
    if fmt == "jsonl":
        return load_corpus_jsonl(path)
    if fmt == "conll-tsv":
        return load_corpus_conll(path)
    raise DataError(f"unknown corpus format {fmt!r} (expected 'jsonl' or 'conll-tsv')")


# ---------------------------------------------------------------------------
# BIO conversion


def bio_to_spans(tags: Sequence[str]) -> list[Span]:
    """Decode BIO tags to (start, end, label) spans, exclusive end.

    A dangling I-X (after O or a different label) is repaired to B-X.
    """
    spans: list[Span] = []
    start: Optional[int] = None
    label: Optional[str] = None
    for i, tag in enumerate(tags):
        if tag == "O":
            if start is not None:
                spans.append((start, i, label))  # type: ignore[arg-type]
                start, label = None, None
            continue
        if len(tag) < 3 or tag[1] != "-" or tag[0] not in "BI":
            raise DataError(f"bad BIO tag {tag!r} at position {i}")
        prefix, lab = tag[0], tag[2:]
        if prefix == "B" or start is None or lab != label:
            if start is not None:
                spans.append((start, i, label))  # type: ignore[arg-type]
            start, label = i, lab
    if start is not None:
        spans.append((start, len(tags), label))  # type: ignore[arg-type]
    return spans


def spans_to_bio(length: int, spans: Sequence[Span]) -> list[str]:
    tags = ["O"] * length
    for start, end, label in sorted(spans, key=lambda s: (s[0], s[1])):
        tags[start] = f"B-{label}"
        for i in range(start + 1, end):
            tags[i] = f"I-{label}"
    return tags


# ---------------------------------------------------------------------------
# POS patterns and candidate mentions

_QUANTIFIERS = ("", "?", "+")


@dataclass(frozen=True)
class PosPattern:
    """Sequence of (tag, quantifier) elements; quantifier in {'', '?', '+'}."""

    elements: tuple[tuple[str, str], ...]

    def __post_init__(self) -> None:
        if not self.elements:
            raise DataError("empty POS pattern")
        for tag, quant in self.elements:
            if not tag or quant not in _QUANTIFIERS:
                raise DataError(f"bad pattern element ({tag!r}, {quant!r})")
        if all(q == "?" for _, q in self.elements):
            raise DataError(f"pattern {self} can match the empty string")

    @classmethod
    def parse(cls, text: str) -> "PosPattern":
        elements = []
        for part in text.split():
            if part.endswith("*"):
                raise DataError(f"unsupported quantifier in {part!r} (use ? or +)")
            if part.endswith("?") or part.endswith("+"):
                elements.append((part[:-1], part[-1]))
            else:
                elements.append((part, ""))
        return cls(elements=tuple(elements))

    def __str__(self) -> str:
        return " ".join(tag + quant for tag, quant in self.elements)

    def match_ends(self, tags: Sequence[str], start: int) -> set[int]:
        """End positions (exclusive) of matches beginning at `start`."""
        positions = {start}
        for tag, quant in self.elements:
            advanced: set[int] = set()
            for p in positions:
                if quant == "?":
                    advanced.add(p)
                if p < len(tags) and tags[p] == tag:
                    if quant == "+":
                        q = p
                        while q < len(tags) and tags[q] == tag:
                            q += 1
                            advanced.add(q)
                    else:
                        advanced.add(p + 1)
            positions = advanced
            if not positions:
                break
        return {p for p in positions if p > start}

    def find_maximal(self, tags: Sequence[str]) -> list[tuple[int, int]]:
        """All matches not properly contained in another match of this pattern."""
        matches: list[tuple[int, int]] = []
        for start in range(len(tags)):
            for end in self.match_ends(tags, start):
                matches.append((start, end))
        maximal = [
            (s, e)
            for s, e in matches
            if not any((s2 <= s and e <= e2 and (s2, e2) != (s, e)) for s2, e2 in matches)
        ]
        return sorted(maximal)


FIXED_PATTERN = "JJ? NN+"


def mine_pos_patterns(dev: Corpus, top_k: int = 15) -> list[PosPattern]:
    """Most frequent literal POS sequences of dev gold spans, plus `JJ? NN+`.

    Ties on frequency break lexicographically by the pattern string.  The
    fixed pattern is always first and never duplicated by a mined one
    (mined patterns carry no quantifiers).
    """
    counts: Counter[str] = Counter()
    for _, _, sentence in dev.sentences():
        if not sentence.gold_spans:
            continue
        for start, end, _ in sentence.gold_spans:
            seq = " ".join(tok.pos for tok in sentence.tokens[start:end])
            counts[seq] += 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    patterns = [PosPattern.parse(FIXED_PATTERN)]
    patterns.extend(PosPattern.parse(seq) for seq, _ in ranked[:top_k])
    return patterns


@dataclass(frozen=True)
class CandidateMention:
    doc: int
    sent: int
    start: int
    end: int
    pattern_id: str

    @property
    def span(self) -> tuple[int, int]:
        return self.start, self.end


def extract_candidates(corpus: Corpus, patterns: Sequence[PosPattern]) -> list[CandidateMention]:
    """Maximal pattern matches over every sentence, deduplicated across patterns.

    When several patterns produce the same span the earliest pattern in the
    list claims it.  Output is sorted by (doc, sent, start, end).
    """
    out: list[CandidateMention] = []
    for doc_i, sent_i, sentence in corpus.sentences():
        tags = [tok.pos for tok in sentence.tokens]
        seen: set[tuple[int, int]] = set()
        for pattern in patterns:
            pid = str(pattern)
            for start, end in pattern.find_maximal(tags):
                if (start, end) in seen:
                    continue
                seen.add((start, end))
                out.append(CandidateMention(doc=doc_i, sent=sent_i, start=start,
                                            end=end, pattern_id=pid))
    out.sort(key=lambda m: (m.doc, m.sent, m.start, m.end))
    return out


def save_mentions(mentions: Sequence[CandidateMention], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for m in mentions:
            fh.write(f"{m.doc}\t{m.sent}\t{m.start}\t{m.end}\t{m.pattern_id}\n")


def load_mentions(path: str, corpus: Corpus) -> list[CandidateMention]:
    mentions = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 5:
                raise DataError(f"{path}:{lineno}: expected 5 columns, got {len(cols)}")
            try:
                doc, sent, start, end = (int(c) for c in cols[:4])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer mention coordinates") from None
            n = len(corpus.sentence(doc, sent).tokens)
            if not 0 <= start < end <= n:
                raise DataError(f"{path}:{lineno}: span ({start},{end}) outside sentence of length {n}")
            mentions.append(CandidateMention(doc=doc, sent=sent, start=start, end=end,
                                             pattern_id=cols[4]))
    return mentions
