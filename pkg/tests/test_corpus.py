"""Corpus loading, BIO conversion, POS patterns, and mention extraction."""
from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rulegraph.corpus import (FIXED_PATTERN, CandidateMention, Corpus,
                              PosPattern, Sentence, Token, bio_to_spans,
                              extract_candidates, load_corpus,
                              load_corpus_conll, load_corpus_jsonl,
                              load_mentions, mine_pos_patterns,
                              save_corpus_conll, save_corpus_jsonl,
                              save_mentions, spans_to_bio)
from rulegraph.errors import DataError

from helpers import one_doc, sent

# ---------------------------------------------------------------------------
# strategies

words = st.text(alphabet="abcXY0", min_size=1, max_size=4)
pos_tags = st.sampled_from(["NN", "JJ", "VB", "DT", "."])
labels = st.sampled_from(["Gene", "Disease"])


@st.composite
def sentences(draw) -> Sentence:
    n = draw(st.integers(min_value=1, max_value=6))
    toks = []
    for i in range(n):
        head = draw(st.one_of(st.none(), st.integers(0, n - 1).filter(lambda h: h != i)))
        dep = draw(st.one_of(st.none(), st.sampled_from(["nsubj", "amod"]))) \
            if head is not None else None
        toks.append(Token(text=draw(words), pos=draw(pos_tags),
                          dep_head=head, dep_label=dep))
    spans = None
    if draw(st.booleans()):
        k = draw(st.integers(0, 2))
        got = set()
        for _ in range(k):
            a = draw(st.integers(0, n - 1))
            b = draw(st.integers(a + 1, n))
            if all(b <= s or a >= e for s, e, _ in got):
                got.add((a, b, draw(labels)))
        spans = tuple(sorted(got))
    return Sentence(tokens=tuple(toks), gold_spans=spans)


@st.composite
def corpora(draw) -> Corpus:
    n_docs = draw(st.integers(1, 3))
    docs = []
    for d in range(n_docs):
        n_sents = draw(st.integers(1, 3))
        docs.append((f"doc{d}", tuple(draw(sentences()) for _ in range(n_sents))))
    return Corpus(documents=tuple(docs))


# ---------------------------------------------------------------------------
# offsets and validation


def test_offsets_and_global_index(tiny_corpus):
    assert tiny_corpus.token_count == 16
    assert tiny_corpus.sentence_offset(0, 0) == 0
    assert tiny_corpus.sentence_offset(0, 1) == 6
    assert tiny_corpus.sentence_offset(1, 0) == 10
    assert tiny_corpus.global_index(1, 0, 3) == 13


def test_empty_token_text_rejected():
    with pytest.raises(DataError):
        one_doc(Sentence(tokens=(Token(text="", pos="NN"),)))


def test_bad_span_rejected():
    with pytest.raises(DataError):
        one_doc(sent("a b", "DT NN", spans=[(0, 3, "X")]))
    with pytest.raises(DataError):
        one_doc(sent("a b", "DT NN", spans=[(1, 1, "X")]))


def test_dep_head_bounds_checked():
    with pytest.raises(DataError):
        one_doc(Sentence(tokens=(Token(text="a", pos="DT", dep_head=5,
                                       dep_label="det"),)))
    with pytest.raises(DataError):  # self loop
        one_doc(Sentence(tokens=(Token(text="a", pos="DT", dep_head=0,
                                       dep_label="det"),)))


# ---------------------------------------------------------------------------
# JSONL


@settings(max_examples=40)
@given(corpora())
def test_jsonl_roundtrip(tmp_path_factory, corpus):
    path = str(tmp_path_factory.mktemp("jl") / "c.jsonl")
    save_corpus_jsonl(corpus, path)
    assert load_corpus_jsonl(path) == corpus


def test_jsonl_duplicate_doc_id(tmp_path):
    path = tmp_path / "c.jsonl"
    rec = {"id": "d", "sentences": [{"tokens": [{"t": "a", "p": "NN"}]}]}
    path.write_text(json.dumps(rec) + "\n" + json.dumps(rec) + "\n")
    with pytest.raises(DataError, match="duplicate"):
        load_corpus_jsonl(str(path))


def test_jsonl_error_carries_line_number(tmp_path):
    path = tmp_path / "c.jsonl"
    good = {"id": "d", "sentences": [{"tokens": [{"t": "a", "p": "NN"}]}]}
    path.write_text(json.dumps(good) + "\nnot json\n")
    with pytest.raises(DataError, match=r":2"):
        load_corpus_jsonl(str(path))


def test_load_corpus_dispatch(tmp_path, tiny_corpus):
    p1 = str(tmp_path / "c.jsonl")
    save_corpus_jsonl(tiny_corpus, p1)
    assert load_corpus(p1, "jsonl") == tiny_corpus
    with pytest.raises(DataError, match="format"):
        load_corpus(p1, "parquet")


# ---------------------------------------------------------------------------
# CoNLL


def test_conll_roundtrip_tagged(tmp_path, tiny_corpus):
    path = str(tmp_path / "c.tsv")
    save_corpus_conll(tiny_corpus, path)
    loaded = load_corpus_conll(path)
    # CoNLL flattens everything into one document
    assert len(loaded.documents) == 1
    flat = [s for _, _, s in loaded.sentences()]
    orig = [s for _, _, s in tiny_corpus.sentences()]
    assert flat == orig


def test_conll_untagged_and_absent_fields(tmp_path):
    path = tmp_path / "c.tsv"
    path.write_text("He\tPRP\t1\tnsubj\nruns\tVB\t_\t_\n")
    corpus = load_corpus_conll(str(path))
    tok = corpus.documents[0][1][0].tokens[0]
    assert tok.dep_head == 1 and tok.dep_label == "nsubj"
    assert corpus.documents[0][1][0].gold_spans is None


def test_conll_mixed_tagging_rejected(tmp_path):
    path = tmp_path / "c.tsv"
    path.write_text("a\tDT\t_\t_\tO\nb\tNN\t_\t_\n")
    with pytest.raises(DataError):
        load_corpus_conll(str(path))


# ---------------------------------------------------------------------------
# BIO


def test_bio_to_spans_basic():
    tags = ["O", "B-Gene", "I-Gene", "O", "B-Gene"]
    assert bio_to_spans(tags) == [(1, 3, "Gene"), (4, 5, "Gene")]


def test_bio_dangling_i_starts_span():
    assert bio_to_spans(["I-Gene", "I-Gene", "O"]) == [(0, 2, "Gene")]
    # label switch inside an I-run starts a new span
    assert bio_to_spans(["B-A", "I-B"]) == [(0, 1, "A"), (1, 2, "B")]


def test_spans_to_bio_basic():
    assert spans_to_bio(5, [(1, 3, "Gene"), (4, 5, "X")]) == \
        ["O", "B-Gene", "I-Gene", "O", "B-X"]


@settings(max_examples=50)
@given(sentences())
def test_bio_span_roundtrip(sentence):
    spans = list(sentence.gold_spans or ())
    tags = spans_to_bio(len(sentence.tokens), spans)
    assert bio_to_spans(tags) == sorted(spans)


# ---------------------------------------------------------------------------
# POS patterns


def brute_force_ends(pattern: PosPattern, tags, start):
    """Enumerate quantifier expansions directly."""
    ends = set()

    def walk(pos, items):
        if not items:
            ends.add(pos)
            return
        (tag, quant), rest = items[0], items[1:]
        if quant in ("?", ""):
            if quant == "?":
                walk(pos, rest)
            if pos < len(tags) and tags[pos] == tag:
                walk(pos + 1, rest)
        else:  # '+'
            p = pos
            while p < len(tags) and tags[p] == tag:
                p += 1
                walk(p, rest)

    walk(start, list(pattern.elements))
    ends.discard(start)
    return ends


@settings(max_examples=60)
@given(st.lists(pos_tags, min_size=1, max_size=8),
       st.sampled_from(["JJ? NN+", "NN+", "JJ NN", "DT? JJ? NN+", "VB+ NN?"]))
def test_match_ends_against_enumeration(tags, text):
    pattern = PosPattern.parse(text)
    for start in range(len(tags)):
        assert pattern.match_ends(tags, start) == brute_force_ends(pattern, tags, start)


def test_pattern_parse_str_roundtrip():
    for text in ("JJ? NN+", "NN", "DT JJ+ NN?"):
        assert str(PosPattern.parse(text)) == text
    with pytest.raises(DataError):
        PosPattern.parse("")
    with pytest.raises(DataError):
        PosPattern.parse("NN*")


def test_find_maximal_drops_contained():
    pattern = PosPattern.parse("JJ? NN+")
    # JJ NN NN: maximal (0,3); contained (1,2),(1,3),(2,3) must be gone
    assert pattern.find_maximal(["JJ", "NN", "NN"]) == [(0, 3)]
    assert pattern.find_maximal(["NN", "JJ", "NN"]) == [(0, 1), (1, 3)]


def test_mine_pos_patterns_order_and_ties(tiny_corpus):
    patterns = mine_pos_patterns(tiny_corpus, top_k=15)
    assert str(patterns[0]) == FIXED_PATTERN
    # JJ NN occurs 3 times, NN once; ties would sort lexicographically
    assert [str(p) for p in patterns[1:]] == ["JJ NN", "NN"]


def test_mine_pos_patterns_top_k(tiny_corpus):
    patterns = mine_pos_patterns(tiny_corpus, top_k=1)
    assert [str(p) for p in patterns] == [FIXED_PATTERN, "JJ NN"]


# ---------------------------------------------------------------------------
# candidate mentions


def test_extract_candidates_dedup_and_order(tiny_corpus):
    patterns = mine_pos_patterns(tiny_corpus, top_k=15)
    mentions = extract_candidates(tiny_corpus, patterns)
    keys = [(m.doc, m.sent, m.start, m.end) for m in mentions]
    assert keys == sorted(keys)
    assert len(set(keys)) == len(keys)
    # "red cell" in d0 s0 matches the fixed pattern first; dedup keeps it
    first = [m for m in mentions if (m.doc, m.sent, m.start, m.end) == (0, 0, 1, 3)]
    assert first and first[0].pattern_id == FIXED_PATTERN


def test_extract_candidates_maximal_match(tiny_corpus):
    mentions = extract_candidates(tiny_corpus, [PosPattern.parse("JJ? NN+")])
    spans = {(m.doc, m.sent, m.start, m.end) for m in mentions}
    assert (0, 0, 2, 3) not in spans       # contained in (1, 3)
    assert (0, 0, 1, 3) in spans


def test_mentions_tsv_roundtrip(tmp_path, tiny_corpus):
    patterns = mine_pos_patterns(tiny_corpus, top_k=15)
    mentions = extract_candidates(tiny_corpus, patterns)
    path = str(tmp_path / "m.tsv")
    save_mentions(mentions, path)
    assert load_mentions(path, tiny_corpus) == mentions


def test_load_mentions_bounds_checked(tmp_path, tiny_corpus):
    path = tmp_path / "m.tsv"
    path.write_text("doc\tsent\tstart\tend\tpattern\n0\t0\t1\t99\t0\n")
    with pytest.raises(DataError):
        load_mentions(str(path), tiny_corpus)
