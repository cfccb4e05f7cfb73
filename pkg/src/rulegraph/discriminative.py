"""Feature-based linear-chain CRF tagger over BIO tags.

Sparse indicator features per token: lowercased identity, prefixes and
suffixes of length 1-4, POS tag, and word shape, each also taken at
offsets +-1 and +-2.  Tag order is O first, then B-X/I-X per sorted label;
structurally invalid transitions (anything -> I-X except from B-X/I-X,
or starting on I-X) are masked to -inf in training, scoring, and decoding,
so predictions always form valid BIO sequences.

Training maximizes the L2-regularized conditional log-likelihood with
full-batch Adam.  Weak supervision enters as expected feature counts:
hard BIO tags give one-hot targets; token marginals over IO classes are
translated to BIO targets with

    P(B-c at t) = q_t(c) * (1 - q_{t-1}(c))      (all mass at t = 0)
    P(I-c at t) = q_t(c) * q_{t-1}(c)
    P(O   at t) = q_t(O)

and pairwise targets proportional to q~_t(y') * q~_{t+1}(y) over valid
transitions, renormalized per boundary.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp

from . import binio
from .corpus import Sentence
from .errors import DataError, NumericError
from .optim import Adam

MAGIC = b"GLCM"
VERSION = 1

NEG_INF = -np.inf

Labels = Union[list[str], np.ndarray]


def word_shape(text: str) -> str:
    return "".join(
        "X" if ch.isupper() else "x" if ch.islower() else "d" if ch.isdigit() else ch
        for ch in text
    )


def token_features(sentence: Sentence, i: int) -> list[str]:
    feats = []
    n = len(sentence.tokens)
    for off in (-2, -1, 0, 1, 2):
        j = i + off
        if not 0 <= j < n:
            continue
        tok = sentence.tokens[j]
        low = tok.text.lower()
        feats.append(f"w@{off}={low}")
        feats.append(f"p@{off}={tok.pos}")
        feats.append(f"sh@{off}={word_shape(tok.text)}")
        for m in range(1, 5):
            if m <= len(low):
                feats.append(f"pre{m}@{off}={low[:m]}")
                feats.append(f"suf{m}@{off}={low[-m:]}")
    return feats


def bio_tag_list(labels: Sequence[str]) -> tuple[str, ...]:
    out = ["O"]
    for label in sorted(set(labels) - {"O"}):
        out.append(f"B-{label}")
        out.append(f"I-{label}")
    return tuple(out)


def _masks(tags: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    n = len(tags)
    start = np.zeros(n)
    trans = np.zeros((n, n))
    for y, tag in enumerate(tags):
        if tag.startswith("I-"):
            start[y] = NEG_INF
            label = tag[2:]
            for y0, prev in enumerate(tags):
                if prev not in (f"B-{label}", f"I-{label}"):
                    trans[y0, y] = NEG_INF
    return start, trans


@dataclass
class CrfModel:
    features: tuple[str, ...]
    tags: tuple[str, ...]
    emission: np.ndarray    # (F, Y)
    transition: np.ndarray  # (Y, Y)
    l2: float
    feature_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.tags[0] != "O":
            raise DataError("tag 0 must be O")
        if self.emission.shape != (len(self.features), len(self.tags)):
            raise DataError(f"emission shape {self.emission.shape} does not match "
                            f"{len(self.features)} features x {len(self.tags)} tags")
        if self.transition.shape != (len(self.tags), len(self.tags)):
            raise DataError(f"transition shape {self.transition.shape} is not square in tags")
        self.feature_index = {f: i for i, f in enumerate(self.features)}

    def featurize(self, sentence: Sentence) -> list[list[int]]:
        """Feature ids per token; unseen features are dropped."""
        index = self.feature_index
        out = []
        for i in range(len(sentence.tokens)):
            ids = [index[f] for f in token_features(sentence, i) if f in index]
            out.append(ids)
        return out


def sentence_potentials(model: CrfModel,
                        sentence: Sentence) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(emission scores (L, Y), masked start scores (Y,), masked transitions (Y, Y))."""
    feats = model.featurize(sentence)
    n_tags = len(model.tags)
    em = np.zeros((len(feats), n_tags))
    for t, ids in enumerate(feats):
        if ids:
            em[t] = model.emission[ids].sum(axis=0)
    start_mask, trans_mask = _masks(model.tags)
    return em, start_mask, model.transition + trans_mask


def sentence_log_partition(model: CrfModel, sentence: Sentence) -> float:
    em, start, trans = sentence_potentials(model, sentence)
    la = em[0] + start
    for t in range(1, em.shape[0]):
        la = logsumexp(la[:, None] + trans, axis=0) + em[t]
    return float(logsumexp(la))


def predict_crf(model: CrfModel, sentence: Sentence) -> list[str]:
    """Viterbi decode; ties break toward the lower tag index."""
    em, start, trans = sentence_potentials(model, sentence)
    length, n_tags = em.shape
    delta = em[0] + start
    back = np.zeros((length, n_tags), dtype=np.int64)
    for t in range(1, length):
        scores = delta[:, None] + trans
        back[t] = np.argmax(scores, axis=0)
        delta = scores[back[t], np.arange(n_tags)] + em[t]
    path = [int(np.argmax(delta))]
    for t in range(length - 1, 0, -1):
        path.append(int(back[t][path[-1]]))
    path.reverse()
    return [model.tags[i] for i in path]


# ---------------------------------------------------------------------------
# Training


def _soft_bio_targets(q: np.ndarray, classes: Sequence[str],
                      tags: Sequence[str]) -> np.ndarray:
    """Per-token BIO distribution from IO class marginals."""
    length = q.shape[0]
    tag_index = {t: i for i, t in enumerate(tags)}
    out = np.zeros((length, len(tags)))
    out[:, tag_index["O"]] = q[:, 0]
    for c, name in enumerate(classes):
        if name == "O":
            continue
        b, i_ = tag_index[f"B-{name}"], tag_index[f"I-{name}"]
        out[0, b] = q[0, c]
        for t in range(1, length):
            out[t, b] = q[t, c] * (1.0 - q[t - 1, c])
            out[t, i_] = q[t, c] * q[t - 1, c]
    return out


def _pairwise_targets(unary: np.ndarray, trans_mask: np.ndarray) -> np.ndarray:
    """(L-1, Y, Y) targets: masked outer products, renormalized per boundary."""
    length, n_tags = unary.shape
    valid = np.isfinite(trans_mask)
    out = np.zeros((max(length - 1, 0), n_tags, n_tags))
    for t in range(length - 1):
        m = np.outer(unary[t], unary[t + 1]) * valid
        total = m.sum()
        if total <= 0.0:
            m = valid / valid.sum()
        else:
            m = m / total
        out[t] = m
    return out


@dataclass
class _Prepared:
    tags: tuple[str, ...]
    features: tuple[str, ...]
    feats: list[list[list[int]]]
    unaries: list[np.ndarray]
    pairwise: list[np.ndarray]
    data_em: np.ndarray
    data_tr: np.ndarray
    start_mask: np.ndarray
    trans_mask: np.ndarray


def _prepare(examples: Sequence[tuple[Sentence, Labels]],
             classes: Optional[Sequence[str]]) -> _Prepared:
    if not examples:
        raise DataError("no training examples")
    hard = [isinstance(y, list) for _, y in examples]
    if any(hard) and not all(hard):
        raise DataError("cannot mix hard tags and marginal targets")
    if all(hard):
        labels = set()
        for _, y in examples:
            for tag in y:
                if tag != "O":
                    if len(tag) < 3 or tag[1] != "-" or tag[0] not in "BI":
                        raise DataError(f"bad BIO tag {tag!r}")
                    labels.add(tag[2:])
        tags = bio_tag_list(sorted(labels))
    else:
        if classes is None or not classes or classes[0] != "O":
            raise DataError("marginal targets need IO class names with O first")
        tags = bio_tag_list(classes)

    vocab: set[str] = set()
    for sentence, _ in examples:
        for i in range(len(sentence.tokens)):
            vocab.update(token_features(sentence, i))
    features = tuple(sorted(vocab))
    index = {f: i for i, f in enumerate(features)}

    start_mask, trans_mask = _masks(tags)
    tag_index = {t: i for i, t in enumerate(tags)}
    feats_all, unaries, pairwise = [], [], []
    for sentence, y in examples:
        length = len(sentence.tokens)
        feats = [[index[f] for f in token_features(sentence, i)] for i in range(length)]
        feats_all.append(feats)
        if isinstance(y, list):
            if len(y) != length:
                raise DataError(f"tag sequence length {len(y)} != sentence length {length}")
            unary = np.zeros((length, len(tags)))
            for t, tag in enumerate(y):
                unary[t, tag_index[tag]] = 1.0
            prev = None
            for t, tag in enumerate(y):
                yi = tag_index[tag]
                if t == 0 and not np.isfinite(start_mask[yi]):
                    raise DataError(f"invalid BIO start tag {tag!r}")
                if prev is not None and not np.isfinite(trans_mask[prev, yi]):
                    raise DataError(f"invalid BIO transition {tags[prev]!r} -> {tag!r}")
                prev = yi
        else:
            q = np.asarray(y, dtype=np.float64)
            if q.shape != (length, len(classes)):
                raise DataError(f"marginal array shape {q.shape} != ({length}, {len(classes)})")
            unary = _soft_bio_targets(q, classes, tags)
        unaries.append(unary)
        pairwise.append(_pairwise_targets(unary, trans_mask))

    data_em = np.zeros((len(features), len(tags)))
    data_tr = np.zeros((len(tags), len(tags)))
    for feats, unary, pairs in zip(feats_all, unaries, pairwise):
        for t, ids in enumerate(feats):
            if ids:
                np.add.at(data_em, ids, unary[t])
        data_tr += pairs.sum(axis=0)
    return _Prepared(tags=tags, features=features, feats=feats_all, unaries=unaries,
                     pairwise=pairwise, data_em=data_em, data_tr=data_tr,
                     start_mask=start_mask, trans_mask=trans_mask)


def _sentence_expectations(emission: np.ndarray, transition: np.ndarray,
                           prepared: _Prepared, s: int,
                           model_em: np.ndarray, model_tr: np.ndarray) -> float:
    """Accumulate model marginal counts for sentence s; returns log Z."""
    feats = prepared.feats[s]
    length = len(feats)
    n_tags = len(prepared.tags)
    em = np.zeros((length, n_tags))
    for t, ids in enumerate(feats):
        if ids:
            em[t] = emission[ids].sum(axis=0)
    trans = transition + prepared.trans_mask
    la = np.empty((length, n_tags))
    la[0] = em[0] + prepared.start_mask
    for t in range(1, length):
        la[t] = logsumexp(la[t - 1][:, None] + trans, axis=0) + em[t]
    log_z = float(logsumexp(la[-1]))
    lb = np.zeros((length, n_tags))
    for t in range(length - 2, -1, -1):
        lb[t] = logsumexp(trans + (em[t + 1] + lb[t + 1])[None, :], axis=1)
    lg = la + lb
    gamma = np.exp(lg - logsumexp(lg, axis=1, keepdims=True))
    for t, ids in enumerate(feats):
        if ids:
            np.add.at(model_em, ids, gamma[t])
    for t in range(length - 1):
        lx = la[t][:, None] + trans + (em[t + 1] + lb[t + 1])[None, :]
        model_tr += np.exp(lx - logsumexp(lx))
    return log_z


def objective_and_gradient(emission: np.ndarray, transition: np.ndarray,
                           prepared: _Prepared,
                           l2: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Regularized conditional log-likelihood and its gradient (ascent direction)."""
    model_em = np.zeros_like(emission)
    model_tr = np.zeros_like(transition)
    total_log_z = 0.0
    for s in range(len(prepared.feats)):
        total_log_z += _sentence_expectations(emission, transition, prepared, s,
                                              model_em, model_tr)
    data_score = float(np.sum(prepared.data_em * emission)
                       + np.sum(prepared.data_tr * transition))
    weight_sq = float(np.sum(emission ** 2) + np.sum(transition ** 2))
    objective = data_score - total_log_z - 0.5 * l2 * weight_sq
    d_em = prepared.data_em - model_em - l2 * emission
    d_tr = prepared.data_tr - model_tr - l2 * transition
    return objective, d_em, d_tr


def train_crf(examples: Sequence[tuple[Sentence, Labels]], *,
              classes: Optional[Sequence[str]] = None, l2: float = 1e-3,
              epochs: int = 30, lr: float = 0.1, seed: int = 0,
              trace: Optional[list[float]] = None) -> CrfModel:
    """Full-batch Adam ascent from zero weights; deterministic given inputs.

    `seed` is accepted for interface stability; initialization is
    deterministic regardless.  Pass a list as `trace` to collect the
    objective entering each epoch.
    """
    if epochs < 0:
        raise DataError(f"epochs must be >= 0, got {epochs}")
    if l2 < 0.0:
        raise DataError(f"l2 must be >= 0, got {l2}")
    del seed
    prepared = _prepare(examples, classes)
    n_feat, n_tags = len(prepared.features), len(prepared.tags)
    emission = np.zeros((n_feat, n_tags))
    transition = np.zeros((n_tags, n_tags))
    adam = Adam(emission.size + transition.size, lr=lr)
    for epoch in range(epochs):
        objective, d_em, d_tr = objective_and_gradient(emission, transition, prepared, l2)
        if not np.isfinite(objective):
            raise NumericError(f"non-finite objective at epoch {epoch}")
        if trace is not None:
            trace.append(objective)
        flat = np.concatenate([emission.ravel(), transition.ravel()])
        grads = np.concatenate([d_em.ravel(), d_tr.ravel()])
        flat = adam.step(flat, -grads)  # ascend
        emission = flat[:emission.size].reshape(emission.shape)
        transition = flat[emission.size:].reshape(transition.shape)
    return CrfModel(features=prepared.features, tags=prepared.tags,
                    emission=emission, transition=transition, l2=l2)


# ---------------------------------------------------------------------------
# Serialization (magic GLCM)


def save_crf_model(model: CrfModel, path: str) -> None:
    with open(path, "wb") as fh:
        binio.write_magic(fh, MAGIC, VERSION)
        binio.write_u32(fh, len(model.features))
        binio.write_u32(fh, len(model.tags))
        for feature in model.features:
            binio.write_str(fh, feature)
        for tag in model.tags:
            binio.write_str(fh, tag)
        binio.write_f32_array(fh, model.emission)
        binio.write_f32_array(fh, model.transition)
        binio.write_f32_array(fh, np.array([model.l2]))


def load_crf_model(path: str) -> CrfModel:
    with open(path, "rb") as fh:
        version = binio.read_magic(fh, MAGIC, path)
        if version != VERSION:
            raise DataError(f"{path}: unsupported version {version}")
        n_feat = binio.read_u32(fh, path)
        n_tags = binio.read_u32(fh, path)
        features = tuple(binio.read_str(fh, path) for _ in range(n_feat))
        tags = tuple(binio.read_str(fh, path) for _ in range(n_tags))
        emission = binio.read_f32_array(fh, n_feat * n_tags, path).reshape(n_feat, n_tags)
        transition = binio.read_f32_array(fh, n_tags * n_tags, path).reshape(n_tags, n_tags)
        l2 = float(binio.read_f32_array(fh, 1, path)[0])
        extra = fh.read(1)
        if extra:
            raise DataError(f"{path}: trailing bytes after parameters")
    return CrfModel(features=features, tags=tags, emission=emission,
                    transition=transition, l2=l2)
