"""Frozen token embeddings, mention/rule pooling, and the hashed fallback.

The binary table format ("GLRE"): 4-byte magic, u32 version (1), u32 dim,
u64 row count, then rows of f32.  Rows align with the corpus global token
order (document by document, sentence by sentence).
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import binio
from .corpus import CandidateMention, Corpus
from .errors import DataError
from .rules import Rule, RuleSet

MAGIC = b"GLRE"
VERSION = 1


@dataclass
class EmbeddingTable:
    corpus: Corpus
    vectors: np.ndarray  # (token_count, dim) float64

    def __post_init__(self) -> None:
        if self.vectors.ndim != 2:
            raise DataError(f"embedding table must be 2-D, got shape {self.vectors.shape}")
        if self.vectors.shape[0] != self.corpus.token_count:
            raise DataError(
                f"embedding table has {self.vectors.shape[0]} rows, "
                f"corpus has {self.corpus.token_count} tokens"
            )
        if not np.all(np.isfinite(self.vectors)):
            raise DataError("embedding table contains non-finite values")

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])


def write_embedding_table(table: EmbeddingTable, path: str) -> None:
    with open(path, "wb") as fh:
        binio.write_magic(fh, MAGIC, VERSION)
        binio.write_u32(fh, table.dim)
        binio.write_u64(fh, table.vectors.shape[0])
        binio.write_f32_array(fh, table.vectors)


def load_embedding_table(path: str, corpus: Corpus) -> EmbeddingTable:
    with open(path, "rb") as fh:
        version = binio.read_magic(fh, MAGIC, path)
        if version != VERSION:
            raise DataError(f"{path}: unsupported version {version}")
        dim = binio.read_u32(fh, path)
        count = binio.read_u64(fh, path)
        if count != corpus.token_count:
            raise DataError(
                f"{path}: table has {count} rows, corpus has {corpus.token_count} tokens"
            )
        flat = binio.read_f32_array(fh, count * dim, path)
    return EmbeddingTable(corpus=corpus, vectors=flat.reshape(count, dim))


def mention_embedding(m: CandidateMention, table: EmbeddingTable) -> np.ndarray:
    """Mean of the span's token vectors."""
    base = table.corpus.global_index(m.doc, m.sent, m.start)
    if m.end > m.start + 1:
        # end is exclusive; validate the last token too
        table.corpus.global_index(m.doc, m.sent, m.end - 1)
    rows = table.vectors[base:base + (m.end - m.start)]
    return rows.mean(axis=0)


def rule_embedding(rule: Rule, matches: Sequence[CandidateMention],
                   table: EmbeddingTable) -> np.ndarray:
    """Mean of matched-mention embeddings over distinct spans.

    Order-insensitive: duplicates of the same (doc, sent, span) collapse.
    """
    distinct = {(m.doc, m.sent, m.start, m.end): m for m in matches}
    if not distinct:
        raise DataError(
            f"embedding undefined for rule ({rule.kind.value}, {rule.key!r}): no matched mentions"
        )
    keys = sorted(distinct)
    vecs = np.stack([mention_embedding(distinct[k], table) for k in keys])
    return vecs.mean(axis=0)


def rule_embeddings(rules: RuleSet, table: EmbeddingTable) -> dict[Rule, np.ndarray]:
    """Embeddings for every rule in the set that matched at least one mention."""
    out: dict[Rule, np.ndarray] = {}
    for rule, matches in zip(rules.rules, rules.matches):
        if matches:
            out[rule] = rule_embedding(rule, matches, table)
    return out


# ---------------------------------------------------------------------------
# Hashed fallback embedder

def _hash_feature(feature: str, salt: bytes) -> tuple[int, float]:
    digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=8, key=salt).digest()
    idx = int.from_bytes(digest[:4], "little")
    sign = 1.0 if digest[4] & 1 else -1.0
    return idx, sign


def _token_features(sentence_tokens: Sequence[str], i: int) -> list[str]:
    padded = f"^{sentence_tokens[i]}$"
    feats = [f"g:{padded[j:j + 3]}" for j in range(len(padded) - 2)]
    lo = max(0, i - 2)
    hi = min(len(sentence_tokens), i + 3)
    feats.extend(f"c:{sentence_tokens[j]}" for j in range(lo, hi) if j != i)
    return feats


def hash_fallback_embed(corpus: Corpus, dim: int, seed: int) -> EmbeddingTable:
    """Deterministic embeddings with no external vectors.

    Each token vector is the signed-hash sum of its padded character
    3-grams and the bag of words within two positions, L2-normalized.
    Identical tokens in identical local contexts get identical vectors.
    """
    if dim < 1:
        raise DataError(f"embedding dim must be >= 1, got {dim}")
    salt = int(seed).to_bytes(8, "little", signed=True)
    vectors = np.zeros((corpus.token_count, dim), dtype=np.float64)
    row = 0
    for _, _, sentence in corpus.sentences():
        lowered = [t.text.lower() for t in sentence.tokens]
        for i in range(len(lowered)):
            vec = vectors[row]
            for feature in _token_features(lowered, i):
                idx, sign = _hash_feature(feature, salt)
                vec[idx % dim] += sign
            norm = float(np.linalg.norm(vec))
            if norm > 0.0:
                vec /= norm
            else:
                # hash cancellation; fall back to a deterministic unit vector
                idx, sign = _hash_feature(f"z:{lowered[i]}", salt)
                vec[idx % dim] = sign
            row += 1
    return EmbeddingTable(corpus=corpus, vectors=vectors)
