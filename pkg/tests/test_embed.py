"""Embedding table IO, pooling, and the hashed fallback."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rulegraph.corpus import CandidateMention
from rulegraph.embed import (EmbeddingTable, hash_fallback_embed,
                             load_embedding_table, mention_embedding,
                             rule_embedding, rule_embeddings,
                             write_embedding_table)
from rulegraph.errors import DataError
from rulegraph.rules import (Polarity, Rule, RuleExtractionConfig, RuleKind,
                             RuleSet, extract_candidate_rules)

from helpers import one_doc, sent


def mention(doc, s, start, end):
    return CandidateMention(doc=doc, sent=s, start=start, end=end, pattern_id="NN+")


def arange_table(corpus):
    """Row i is [i, i+0.5]; every value exact in float32."""
    n = corpus.token_count
    vecs = np.stack([np.arange(n, dtype=np.float64),
                     np.arange(n, dtype=np.float64) + 0.5], axis=1)
    return EmbeddingTable(corpus=corpus, vectors=vecs)


# ---------------------------------------------------------------------------
# table construction and binary round-trip


def test_table_shape_must_match_corpus(tiny_corpus):
    with pytest.raises(DataError, match="rows"):
        EmbeddingTable(corpus=tiny_corpus, vectors=np.zeros((3, 4)))
    with pytest.raises(DataError, match="2-D"):
        EmbeddingTable(corpus=tiny_corpus,
                       vectors=np.zeros(tiny_corpus.token_count))


def test_table_rejects_non_finite(tiny_corpus):
    vecs = np.zeros((tiny_corpus.token_count, 2))
    vecs[0, 0] = np.nan
    with pytest.raises(DataError, match="non-finite"):
        EmbeddingTable(corpus=tiny_corpus, vectors=vecs)


def test_roundtrip_exact_for_f32_values(tiny_corpus, tmp_path):
    table = arange_table(tiny_corpus)
    path = str(tmp_path / "t.glre")
    write_embedding_table(table, path)
    back = load_embedding_table(path, tiny_corpus)
    assert back.dim == 2
    assert np.array_equal(back.vectors, table.vectors)


def test_roundtrip_quantizes_to_f32(tiny_corpus, tmp_path):
    rng = np.random.default_rng(0)
    vecs = rng.normal(size=(tiny_corpus.token_count, 3))
    table = EmbeddingTable(corpus=tiny_corpus, vectors=vecs)
    path = str(tmp_path / "t.glre")
    write_embedding_table(table, path)
    back = load_embedding_table(path, tiny_corpus)
    assert np.array_equal(back.vectors, vecs.astype(np.float32).astype(np.float64))


def test_load_rejects_token_count_mismatch(tiny_corpus, tmp_path):
    table = arange_table(tiny_corpus)
    path = str(tmp_path / "t.glre")
    write_embedding_table(table, path)
    shorter = one_doc(sent("just three tokens", "RB CD NN"))
    with pytest.raises(DataError, match="3 tokens"):
        load_embedding_table(path, shorter)


def test_load_rejects_bad_magic(tiny_corpus, tmp_path):
    path = tmp_path / "junk.glre"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(DataError):
        load_embedding_table(str(path), tiny_corpus)


def test_load_rejects_truncated_file(tiny_corpus, tmp_path):
    table = arange_table(tiny_corpus)
    path = tmp_path / "t.glre"
    write_embedding_table(table, str(path))
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(DataError):
        load_embedding_table(str(path), tiny_corpus)


# ---------------------------------------------------------------------------
# pooling


def test_mention_embedding_is_span_mean(tiny_corpus):
    table = arange_table(tiny_corpus)
    # d0 sentence 0 starts at global row 0; span tokens 1..2 -> rows 1, 2
    got = mention_embedding(mention(0, 0, 1, 3), table)
    assert np.allclose(got, [(1 + 2) / 2, (1.5 + 2.5) / 2])
    # d1 sentence 0 starts after d0's 10 tokens; token 3 -> row 13
    got = mention_embedding(mention(1, 0, 3, 4), table)
    assert np.allclose(got, [13.0, 13.5])


def test_mention_embedding_bounds_checked(tiny_corpus):
    table = arange_table(tiny_corpus)
    with pytest.raises(DataError):
        mention_embedding(mention(0, 0, 4, 8), table)


def test_rule_embedding_collapses_duplicate_spans(tiny_corpus):
    table = arange_table(tiny_corpus)
    a, b = mention(0, 0, 1, 2), mention(0, 1, 1, 2)
    va = mention_embedding(a, table)
    vb = mention_embedding(b, table)
    rule = Rule(kind=RuleKind.SURFACE, key="cell", label="Cell",
                polarity=Polarity.POSITIVE)
    expect = (va + vb) / 2
    assert np.allclose(rule_embedding(rule, [a, b, a, a], table), expect)
    assert np.allclose(rule_embedding(rule, [b, a], table), expect)


def test_rule_embedding_requires_matches(tiny_corpus):
    table = arange_table(tiny_corpus)
    rule = Rule(kind=RuleKind.SURFACE, key="ghost", label="Cell",
                polarity=Polarity.POSITIVE)
    with pytest.raises(DataError, match="no matched mentions"):
        rule_embedding(rule, [], table)


def test_rule_embeddings_covers_supported_rules(tiny_corpus):
    table = arange_table(tiny_corpus)
    mentions = [mention(0, 0, 1, 3), mention(0, 1, 1, 2)]
    rules = extract_candidate_rules(tiny_corpus, mentions,
                                    RuleExtractionConfig(min_support=1), "Cell")
    table_map = rule_embeddings(rules, table)
    assert set(table_map) == set(rules.rules)
    for rule, matches in zip(rules.rules, rules.matches):
        assert np.allclose(table_map[rule], rule_embedding(rule, matches, table))


def test_rule_embeddings_skips_matchless(tiny_corpus):
    table = arange_table(tiny_corpus)
    rs = RuleSet()
    rule = Rule(kind=RuleKind.SURFACE, key="ghost", label="Cell",
                polarity=Polarity.POSITIVE)
    rs.add(rule, [])
    assert rule_embeddings(rs, table) == {}


# ---------------------------------------------------------------------------
# hashed fallback


def test_hash_embed_deterministic(tiny_corpus):
    a = hash_fallback_embed(tiny_corpus, 32, seed=7)
    b = hash_fallback_embed(tiny_corpus, 32, seed=7)
    assert np.array_equal(a.vectors, b.vectors)
    c = hash_fallback_embed(tiny_corpus, 32, seed=8)
    assert not np.array_equal(a.vectors, c.vectors)


def test_hash_embed_rows_unit_norm(tiny_corpus):
    table = hash_fallback_embed(tiny_corpus, 16, seed=0)
    norms = np.linalg.norm(table.vectors, axis=1)
    assert np.allclose(norms, 1.0, atol=1e-12)


def test_hash_embed_context_sensitivity():
    c = one_doc(sent("red cell .", "JJ NN ."),
                sent("red cell .", "JJ NN ."),
                sent("blue cell .", "JJ NN ."))
    table = hash_fallback_embed(c, 64, seed=1)
    # same word, same two-sided window -> identical rows
    assert np.array_equal(table.vectors[1], table.vectors[4])
    # same word, different context -> different rows
    assert not np.array_equal(table.vectors[1], table.vectors[7])


def test_hash_embed_rejects_bad_dim(tiny_corpus):
    with pytest.raises(DataError, match="dim"):
        hash_fallback_embed(tiny_corpus, 0, seed=0)


@settings(max_examples=25, deadline=None)
@given(dim=st.integers(min_value=1, max_value=48), seed=st.integers(0, 2**31 - 1))
def test_hash_embed_norm_property(dim, seed):
    c = one_doc(sent("a b a", "DT NN DT"))
    table = hash_fallback_embed(c, dim, seed)
    assert table.vectors.shape == (3, dim)
    assert np.allclose(np.linalg.norm(table.vectors, axis=1), 1.0)
