"""Rule extraction and matching semantics."""
from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rulegraph.corpus import CandidateMention, Token, extract_candidates, mine_pos_patterns
from rulegraph.errors import DataError
from rulegraph.rules import (Polarity, Rule, RuleExtractionConfig, RuleKind,
                             RuleSet, extract_candidate_rules, load_seed_rules,
                             match_many, match_rule, save_rules)

from helpers import one_doc, sent


def mention(doc, s, start, end):
    return CandidateMention(doc=doc, sent=s, start=start, end=end, pattern_id="NN+")


# ---------------------------------------------------------------------------
# candidate key generation


def test_multi_token_mention_keys():
    c = one_doc(sent("the Red Cell grows . x y", "DT JJ NN VB . NN NN"))
    m = mention(0, 0, 1, 3)  # "Red Cell"
    cfg = RuleExtractionConfig(min_support=1)
    rules = extract_candidate_rules(c, [m, m], cfg, "Cell")
    got = {(r.kind, r.key) for r in rules}
    assert (RuleKind.SURFACE, "red_cell") in got
    # multi-token: no affixes
    assert not any(k in (RuleKind.PREFIX, RuleKind.SUFFIX) for k, _ in got)
    # inclusive n-grams live inside the span (leading/trailing n tokens)
    assert (RuleKind.PRE_NGRAM_IN, "red") in got
    assert (RuleKind.PRE_NGRAM_IN, "red_cell") in got
    assert (RuleKind.POST_NGRAM_IN, "cell") in got
    assert (RuleKind.POST_NGRAM_IN, "red_cell") in got
    assert (RuleKind.PRE_NGRAM_IN, "the_red") not in got
    # exclusive n-grams use context only; n=2 on the left needs two tokens
    assert (RuleKind.PRE_NGRAM_EX, "the") in got
    assert (RuleKind.PRE_NGRAM_EX, "the_red") not in got
    assert (RuleKind.POST_NGRAM_EX, "grows") in got
    assert (RuleKind.POST_NGRAM_EX, "grows_.") in got
    assert (RuleKind.POST_NGRAM_EX, "grows_._x") in got


def test_single_token_mention_affixes():
    c = one_doc(sent("Hemoglobin binds .", "NN VB ."))
    m = mention(0, 0, 0, 1)
    cfg = RuleExtractionConfig(min_support=1)
    rules = extract_candidate_rules(c, [m], cfg, "Protein")
    got = {(r.kind, r.key) for r in rules}
    assert (RuleKind.PREFIX, "hem") in got
    assert (RuleKind.PREFIX, "hemogl") in got
    assert (RuleKind.SUFFIX, "bin") in got
    assert (RuleKind.SUFFIX, "globin") in got
    assert (RuleKind.PREFIX, "hemoglo") not in got  # m > 6
    # no left context: no exclusive pre n-grams
    assert not any(k == RuleKind.PRE_NGRAM_EX for k, _ in got)


def test_affixes_skipped_when_word_too_short():
    c = one_doc(sent("ab runs .", "NN VB ."))
    cfg = RuleExtractionConfig(min_support=1)
    rules = extract_candidate_rules(c, [mention(0, 0, 0, 1)], cfg, "X")
    assert not any(r.kind in (RuleKind.PREFIX, RuleKind.SUFFIX) for r in rules)


def test_dep_keys_from_heads():
    toks = (Token(text="Red", pos="JJ", dep_head=1, dep_label="amod"),
            Token(text="Cell", pos="NN", dep_head=2, dep_label="nsubj"),
            Token(text="grows", pos="VB"))
    from rulegraph.corpus import Sentence
    c = one_doc(Sentence(tokens=toks))
    cfg = RuleExtractionConfig(min_support=1)
    rules = extract_candidate_rules(c, [mention(0, 0, 0, 2)], cfg, "X")
    got = {(r.kind, r.key) for r in rules}
    assert (RuleKind.DEP_FIRST, "amod_cell") in got
    # second-to-last token of "Red Cell" is "Red" itself
    assert (RuleKind.DEP_SECOND_LAST, "amod_cell") in got


def test_min_support_counts_distinct_mentions():
    c = one_doc(sent("cell grows .", "NN VB ."), sent("cell shrinks .", "NN VB ."))
    m1, m2 = mention(0, 0, 0, 1), mention(0, 1, 0, 1)
    cfg = RuleExtractionConfig(min_support=2)
    # same mention twice is one distinct support
    none = extract_candidate_rules(c, [m1, m1], cfg, "X")
    assert (RuleKind.SURFACE, "cell") not in {(r.kind, r.key) for r in none}
    both = extract_candidate_rules(c, [m1, m2], cfg, "X")
    assert (RuleKind.SURFACE, "cell") in {(r.kind, r.key) for r in both}


def test_extraction_order_deterministic():
    c = one_doc(sent("alpha beta .", "NN NN ."))
    cfg = RuleExtractionConfig(min_support=1)
    ms = [mention(0, 0, 0, 1), mention(0, 0, 1, 2)]
    r1 = extract_candidate_rules(c, ms, cfg, "X")
    r2 = extract_candidate_rules(c, list(reversed(ms)), cfg, "X")
    assert r1.rules == r2.rules


# ---------------------------------------------------------------------------
# matching


def test_surface_match_case_folded():
    c = one_doc(sent("RED Cell and red cell .", "JJ NN CC JJ NN ."))
    rule = Rule(kind=RuleKind.SURFACE, key="red_cell", label="X",
                polarity=Polarity.POSITIVE)
    ms = [mention(0, 0, 0, 2), mention(0, 0, 3, 5)]
    assert match_rule(rule, c, ms) == ms


def test_affix_match_single_token_only():
    c = one_doc(sent("hemoglobin and globin protein .", "NN CC NN NN ."))
    rule = Rule(kind=RuleKind.SUFFIX, key="bin", label="X",
                polarity=Polarity.POSITIVE)
    ms = [mention(0, 0, 0, 1), mention(0, 0, 2, 4), mention(0, 0, 2, 3)]
    assert match_rule(rule, c, ms) == [ms[0], ms[2]]


def test_prengram_exclusive_vs_inclusive():
    c = one_doc(sent("the red cell grows .", "DT JJ NN VB ."))
    m = mention(0, 0, 1, 3)  # "red cell"

    def hits(kind, key):
        rule = Rule(kind=kind, key=key, label="X", polarity=Polarity.POSITIVE)
        return match_rule(rule, c, [m])

    # exclusive reads context, inclusive reads the span itself
    assert hits(RuleKind.PRE_NGRAM_EX, "the") == [m]
    assert hits(RuleKind.PRE_NGRAM_EX, "red") == []
    assert hits(RuleKind.PRE_NGRAM_IN, "red") == [m]
    assert hits(RuleKind.PRE_NGRAM_IN, "red_cell") == [m]
    assert hits(RuleKind.PRE_NGRAM_IN, "the_red") == []
    assert hits(RuleKind.POST_NGRAM_EX, "grows") == [m]
    assert hits(RuleKind.POST_NGRAM_EX, "grows_.") == [m]
    assert hits(RuleKind.POST_NGRAM_IN, "cell") == [m]
    assert hits(RuleKind.POST_NGRAM_IN, "red_cell") == [m]
    assert hits(RuleKind.POST_NGRAM_IN, "cell_grows") == []
    # inclusive n-grams never exceed the span
    assert hits(RuleKind.PRE_NGRAM_IN, "red_cell_grows") == []


def test_dep_match_survives_underscored_labels():
    # dep label itself contains "_"; the extracted key must match itself
    toks = (Token(text="x", pos="NN", dep_head=1, dep_label="compound_part"),
            Token(text="hub", pos="NN"))
    from rulegraph.corpus import Sentence
    c = one_doc(Sentence(tokens=toks))
    m = mention(0, 0, 0, 2)
    cfg = RuleExtractionConfig(min_support=1)
    extracted = extract_candidate_rules(c, [m], cfg, "X")
    dep_rules = [r for r in extracted.rules if r.kind is RuleKind.DEP_FIRST]
    assert [r.key for r in dep_rules] == ["compound_part_hub"]
    assert match_rule(dep_rules[0], c, [m]) == [m]
    wrong = Rule(kind=RuleKind.DEP_FIRST, key="compound_hub", label="X",
                 polarity=Polarity.POSITIVE)
    assert match_rule(wrong, c, [m]) == []


def test_extracted_rules_match_their_support(tiny_corpus):
    patterns = mine_pos_patterns(tiny_corpus, top_k=15)
    mentions = extract_candidates(tiny_corpus, patterns)
    cfg = RuleExtractionConfig(min_support=1)
    rules = extract_candidate_rules(tiny_corpus, mentions, cfg, "Cell")
    assert len(rules) > 0
    for rule, support in zip(rules.rules, rules.matches):
        rematched = match_rule(rule, tiny_corpus, mentions)
        assert rematched == support


def test_match_many_agrees_with_match_rule(tiny_corpus):
    patterns = mine_pos_patterns(tiny_corpus, top_k=15)
    mentions = extract_candidates(tiny_corpus, patterns)
    cfg = RuleExtractionConfig(min_support=1)
    rules = extract_candidate_rules(tiny_corpus, mentions, cfg, "Cell").rules
    batch = match_many(rules, tiny_corpus, mentions)
    for rule, got in zip(rules, batch):
        assert got == match_rule(rule, tiny_corpus, mentions)


# ---------------------------------------------------------------------------
# RuleSet and TSV


def test_ruleset_rejects_duplicates():
    rs = RuleSet()
    r = Rule(kind=RuleKind.SURFACE, key="a", label="X", polarity=Polarity.POSITIVE)
    rs.add(r)
    with pytest.raises(DataError, match="duplicate"):
        rs.add(r)
    # same key, other polarity, is a distinct rule
    rs.add(Rule(kind=RuleKind.SURFACE, key="a", label="X", polarity=Polarity.NEGATIVE))
    assert len(rs) == 2


def test_rule_vote():
    pos = Rule(kind=RuleKind.SURFACE, key="a", label="X", polarity=Polarity.POSITIVE)
    neg = Rule(kind=RuleKind.SURFACE, key="a", label="X", polarity=Polarity.NEGATIVE)
    assert pos.vote == "X" and neg.vote == "O"


def test_seed_tsv_roundtrip(tmp_path):
    rules = [
        Rule(kind=RuleKind.SUFFIX, key="oma", label="Disease", polarity=Polarity.POSITIVE),
        Rule(kind=RuleKind.SURFACE, key="aspirin", label="Disease", polarity=Polarity.NEGATIVE),
    ]
    path = str(tmp_path / "seeds.tsv")
    save_rules(rules, path)
    loaded = load_seed_rules(path)
    assert loaded.rules == rules


def test_seed_tsv_comments_and_errors(tmp_path):
    path = tmp_path / "seeds.tsv"
    path.write_text("# comment line\nsuffix\toma\tDisease\tpos\n")
    assert len(load_seed_rules(str(path))) == 1

    path.write_text("sufix\toma\tDisease\tpos\n")
    with pytest.raises(DataError, match=r":1:"):
        load_seed_rules(str(path))

    path.write_text("suffix\toma\tDisease\tmaybe\n")
    with pytest.raises(DataError, match=r":1:"):
        load_seed_rules(str(path))

    path.write_text("suffix\toma\tDisease\tpos\nsuffix\toma\tDisease\tpos\n")
    with pytest.raises(DataError, match="duplicate"):
        load_seed_rules(str(path))


@settings(max_examples=30)
@given(st.lists(
    st.builds(Rule,
              kind=st.sampled_from([RuleKind.SURFACE, RuleKind.PREFIX, RuleKind.SUFFIX]),
              key=st.text(alphabet="abc", min_size=1, max_size=5),
              label=st.sampled_from(["X", "Y"]),
              polarity=st.sampled_from([Polarity.POSITIVE, Polarity.NEGATIVE])),
    unique=True, max_size=8))
def test_rules_tsv_roundtrip_property(tmp_path_factory, rules):
    path = str(tmp_path_factory.mktemp("rs") / "r.tsv")
    save_rules(rules, path)
    assert load_seed_rules(path).rules == list(rules)
