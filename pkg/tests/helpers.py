"""Builders and numeric utilities shared across test modules."""
from __future__ import annotations

import numpy as np

from rulegraph.corpus import Corpus, Sentence, Token
from rulegraph.propagation import RuleGraph
from rulegraph.rules import Polarity, Rule, RuleKind


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Relative error with an absolute floor for near-zero gradients."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(np.linalg.norm(analytic - numeric) / denom)


def central_diff(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function, one coordinate at a time."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        bumped = x.copy()
        bumped[i] += h
        up = f(bumped)
        bumped[i] -= 2 * h
        down = f(bumped)
        grad[i] = (up - down) / (2 * h)
    return grad


def sent(words: str, pos: str, spans=None) -> Sentence:
    """Build a sentence from space-separated words and POS tags."""
    toks = words.split()
    tags = pos.split()
    assert len(toks) == len(tags)
    return Sentence(tokens=tuple(Token(text=w, pos=p) for w, p in zip(toks, tags)),
                    gold_spans=tuple(spans) if spans is not None else None)


def one_doc(*sentences: Sentence, doc_id: str = "d0") -> Corpus:
    return Corpus(documents=((doc_id, tuple(sentences)),))


def random_rule_graph(rng: np.random.Generator, n_nodes: int, dim: int,
                      n_pos: int = 2, n_neg: int = 2, k: int = 3) -> RuleGraph:
    """Random graph with disjoint seed sets, for gradient checks."""
    rules = [Rule(kind=RuleKind.SURFACE, key=f"w{i}", label="X",
                  polarity=Polarity.POSITIVE) for i in range(n_nodes)]
    emb = rng.normal(size=(n_nodes, dim))
    order = rng.permutation(n_nodes)
    seed_pos = tuple(sorted(int(i) for i in order[:n_pos]))
    seed_neg = tuple(sorted(int(i) for i in order[n_pos:n_pos + n_neg]))
    neighbors = []
    for i in range(n_nodes):
        others = [j for j in range(n_nodes) if j != i]
        chosen = rng.choice(others, size=min(k, len(others)), replace=False)
        neighbors.append(set(int(j) for j in chosen))
    # symmetrize by union, as the builder does
    for i in range(n_nodes):
        for j in list(neighbors[i]):
            neighbors[j].add(i)
    return RuleGraph(rules=rules, embeddings=emb,
                     neighbors=[tuple(sorted(s)) for s in neighbors],
                     seed_pos=seed_pos, seed_neg=seed_neg, k=k)
