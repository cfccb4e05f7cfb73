"""Synthetic corpus generator with planted vocabulary clusters.

Entity words are stem+suffix with a dozen planted entity suffix families;
distractor nouns use their own disjoint suffix families.  Entities follow
fixed cue bigrams, distractors follow neutral bigrams, so surface, affix,
and context rules all carry signal.  Ten seed rules (three suffix pairs,
two surface pairs split across polarities) leave most families unseeded
for augmentation to discover.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .corpus import Corpus, Sentence, Span, Token, save_corpus_jsonl
from .rules import Polarity, Rule, RuleKind, RuleSet, save_rules

LABEL = "Thing"

N_FAMILIES = 12
WORDS_PER_FAMILY = 25
N_CUE_PAIRS = 4
N_FILLERS = 18


@dataclass
class SynthVocab:
    entity_families: list[tuple[str, list[str]]]      # (suffix, words)
    distractor_families: list[tuple[str, list[str]]]
    cue_pairs: list[tuple[str, str]]
    neutral_pairs: list[tuple[str, str]]
    fillers: list[tuple[str, str]]                    # (word, pos)


def _random_word(rng: np.random.Generator, length: int) -> str:
    letters = "abcdefghijklmnopqrstuvwxyz"
    return "".join(letters[i] for i in rng.integers(0, 26, size=length))


def _fresh_word(rng: np.random.Generator, length: int, taken: set[str]) -> str:
    while True:
        word = _random_word(rng, length)
        if word not in taken:
            taken.add(word)
            return word


def build_vocab(seed: int) -> SynthVocab:
    rng = np.random.default_rng(seed)
    taken: set[str] = set()

    def family(suffix: str) -> tuple[str, list[str]]:
        words = []
        for _ in range(WORDS_PER_FAMILY):
            stem = _fresh_word(rng, int(rng.integers(4, 7)), taken)
            words.append(stem + suffix)
        return suffix, words

    suffixes = [_fresh_word(rng, 3, taken) for _ in range(2 * N_FAMILIES)]
    entity_families = [family(s) for s in suffixes[:N_FAMILIES]]
    distractor_families = [family(s) for s in suffixes[N_FAMILIES:]]
    cue_pairs = [(_fresh_word(rng, 5, taken), _fresh_word(rng, 4, taken))
                 for _ in range(N_CUE_PAIRS)]
    neutral_pairs = [(_fresh_word(rng, 5, taken), _fresh_word(rng, 4, taken))
                     for _ in range(N_CUE_PAIRS)]
    pos_cycle = ["DT", "RB", "VB", "IN"]
    fillers = [(_fresh_word(rng, int(rng.integers(3, 6)), taken), pos_cycle[i % 4])
               for i in range(N_FILLERS)]
    return SynthVocab(entity_families=entity_families,
                      distractor_families=distractor_families,
                      cue_pairs=cue_pairs, neutral_pairs=neutral_pairs,
                      fillers=fillers)


def _make_sentence(vocab: SynthVocab, rng: np.random.Generator,
                   with_gold: bool) -> Sentence:
    tokens: list[Token] = []
    spans: list[Span] = []

    def add_fillers(k: int) -> None:
        for _ in range(k):
            word, pos = vocab.fillers[rng.integers(0, len(vocab.fillers))]
            tokens.append(Token(text=word, pos=pos))

    def add_noun(pairs, families, entity: bool) -> None:
        a, b = pairs[rng.integers(0, len(pairs))]
        tokens.append(Token(text=a, pos="VB"))
        tokens.append(Token(text=b, pos="IN"))
        _, words = families[rng.integers(0, len(families))]
        word = words[rng.integers(0, len(words))]
        if entity:
            spans.append((len(tokens), len(tokens) + 1, LABEL))
        tokens.append(Token(text=word, pos="NN"))

    add_fillers(int(rng.integers(1, 4)))
    segments = []
    if rng.random() < 0.7:
        segments.append(True)
    if rng.random() < 0.6:
        segments.append(False)
    rng.shuffle(segments)
    for is_entity in segments:
        if is_entity:
            add_noun(vocab.cue_pairs, vocab.entity_families, entity=True)
        else:
            add_noun(vocab.neutral_pairs, vocab.distractor_families, entity=False)
        add_fillers(int(rng.integers(1, 4)))
    tokens.append(Token(text=".", pos="."))
    return Sentence(tokens=tuple(tokens),
                    gold_spans=tuple(spans) if with_gold else None)


def make_corpus(vocab: SynthVocab, n_sentences: int, seed: int,
                with_gold: bool, sentences_per_doc: int = 50) -> Corpus:
    rng = np.random.default_rng(seed)
    documents = []
    sentences: list[Sentence] = []
    for i in range(n_sentences):
        sentences.append(_make_sentence(vocab, rng, with_gold))
        if len(sentences) == sentences_per_doc or i == n_sentences - 1:
            documents.append((f"doc_{len(documents):04d}", tuple(sentences)))
            sentences = []
    return Corpus(documents=tuple(documents))


def make_seed_rules(vocab: SynthVocab) -> RuleSet:
    """Ten seeds: 3 pos + 3 neg suffixes, 2 pos + 2 neg surfaces."""
    seeds = RuleSet()
    for suffix, _ in vocab.entity_families[:3]:
        seeds.add(Rule(kind=RuleKind.SUFFIX, key=suffix, label=LABEL,
                       polarity=Polarity.POSITIVE))
    for suffix, _ in vocab.distractor_families[:3]:
        seeds.add(Rule(kind=RuleKind.SUFFIX, key=suffix, label=LABEL,
                       polarity=Polarity.NEGATIVE))
    for fam in (3, 4):
        word = vocab.entity_families[fam][1][0]
        seeds.add(Rule(kind=RuleKind.SURFACE, key=word, label=LABEL,
                       polarity=Polarity.POSITIVE))
        dword = vocab.distractor_families[fam][1][0]
        seeds.add(Rule(kind=RuleKind.SURFACE, key=dword, label=LABEL,
                       polarity=Polarity.NEGATIVE))
    return seeds


@dataclass
class SyntheticDataset:
    train: Corpus
    dev: Corpus
    test: Corpus
    seeds: RuleSet
    vocab: SynthVocab


def make_dataset(seed: int, n_train: int = 2000, n_dev: int = 300,
                 n_test: int = 500) -> SyntheticDataset:
    vocab = build_vocab(seed)
    ss = np.random.SeedSequence(seed).generate_state(3, dtype=np.uint32)
    return SyntheticDataset(
        train=make_corpus(vocab, n_train, int(ss[0]), with_gold=False),
        dev=make_corpus(vocab, n_dev, int(ss[1]), with_gold=True),
        test=make_corpus(vocab, n_test, int(ss[2]), with_gold=True),
        seeds=make_seed_rules(vocab),
        vocab=vocab,
    )


def default_config(data_dir: str, out_dir: str, seed: int,
                   em_epochs: int = 5, crf_epochs: int = 15,
                   gat_epochs: int = 150) -> dict:
    """Pipeline config dict wired for the files write_dataset() lays down.

    Affix length is pinned to the planted suffix length so family suffixes
    are single graph nodes rather than clouds of longer variants, and the
    embedding width keeps hash collisions from blurring the clusters.
    """
    return {
        "train_corpus": os.path.join(data_dir, "train.jsonl"),
        "dev_corpus": os.path.join(data_dir, "dev.jsonl"),
        "test_corpus": os.path.join(data_dir, "test.jsonl"),
        "seed_rules": os.path.join(data_dir, "seeds.tsv"),
        "output_dir": out_dir,
        "seed": seed,
        "embeddings": {"fallback": True, "dim": 256},
        "extraction": {"m_min": 3, "m_max": 3, "n_min": 1, "n_max": 1,
                       "min_support": 2},
        "graph": {"k": 10},
        "propagation": {
            "dropout": 0.1,
            "learning_rate": 0.01,
            "kinds": {
                "suffix": {"enabled": True, "num_new_rules": 9, "epochs": gat_epochs},
                "surface": {"enabled": False, "num_new_rules": 40, "epochs": gat_epochs},
            },
        },
        "generative": {"init_acc": 0.9, "acc_prior": 50.0, "balance_prior": 2.0,
                       "em_epochs": em_epochs},
        "crf": {"enabled": True, "epochs": crf_epochs, "learning_rate": 0.1,
                "l2": 0.001, "soft_labels": False},
    }


def write_dataset(dataset: SyntheticDataset, data_dir: str) -> None:
    os.makedirs(data_dir, exist_ok=True)
    save_corpus_jsonl(dataset.train, os.path.join(data_dir, "train.jsonl"))
    save_corpus_jsonl(dataset.dev, os.path.join(data_dir, "dev.jsonl"))
    save_corpus_jsonl(dataset.test, os.path.join(data_dir, "test.jsonl"))
    save_rules(dataset.seeds, os.path.join(data_dir, "seeds.tsv"))


def write_config(config: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")
