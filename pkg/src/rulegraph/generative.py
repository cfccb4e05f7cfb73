"""Generative HMM over rule votes, fit with MAP-EM.

Latent token tags use an IO scheme: tag 0 is O, one tag per entity class.
The chain has initial probabilities pi and transitions trans; each rule j
has an accuracy theta_j and per-tag vote propensity rho[j, t].  Given the
true tag y, a non-abstaining vote v from rule j contributes

    rho[j, y] * (theta_j           if v == y
                 (1-theta_j)/(T-1) otherwise)

and an abstain contributes 1 - rho[j, y].  A link vote on an adjacent pair
multiplies the transition potential: LINK favors equal tags with odds
acc/(1-acc), BREAK the complement.

The M-step is MAP under
    theta, link accuracies:  Beta(acc_prior*init_acc + 1, acc_prior*(1-init_acc) + 1)
    rho:                     Beta(2, 2)  (Laplace)
    pi and transition rows:  Dirichlet(2 + balance_prior on O, 2, ...)
so with no evidence every parameter sits at its prior mode and the
observed-data log-posterior is non-decreasing across epochs.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from . import binio
from .corpus import Corpus, Span
from .errors import DataError, NumericError
from .labeling import LINK, LabelMatrix, LinkVoteTable

MAGIC = b"GLGM"
VERSION = 1


@dataclass(frozen=True)
class TagSet:
    tags: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.tags or self.tags[0] != "O":
            raise DataError("tag 0 must be O")
        if len(self.tags) < 2:
            raise DataError("need at least one entity class besides O")
        if len(set(self.tags)) != len(self.tags):
            raise DataError("duplicate tags")

    @classmethod
    def from_labels(cls, labels: Sequence[str]) -> "TagSet":
        return cls(tags=("O",) + tuple(sorted(set(labels) - {"O"})))

    def index(self, tag: str) -> int:
        try:
            return self.tags.index(tag)
        except ValueError:
            raise DataError(f"unknown tag {tag!r}") from None

    def __len__(self) -> int:
        return len(self.tags)


@dataclass
class GenerativeModel:
    tags: TagSet
    pi: np.ndarray        # (T,)
    trans: np.ndarray     # (T, T)
    theta: np.ndarray     # (J,)
    rho: np.ndarray       # (J, T)
    link_acc: np.ndarray  # (S,)
    init_acc: float
    acc_prior: float
    balance_prior: float

    @property
    def n_rules(self) -> int:
        return int(self.theta.shape[0])


@dataclass
class SentenceVotes:
    doc: int
    sent: int
    length: int
    token_votes: list[list[tuple[int, int]]]      # per token: (rule index, tag index)
    link_votes: list[list[tuple[int, str]]]       # per boundary 1..L-1: (source, LINK/BREAK)


def compile_votes(matrix: LabelMatrix, links: Sequence[LinkVoteTable],
                  tags: TagSet) -> list[SentenceVotes]:
    compiled = []
    for doc_i, sent_i, per_token in matrix.by_sentence():
        length = len(per_token)
        token_votes = [[(j, tags.index(v)) for j, v in votes] for votes in per_token]
        link_votes: list[list[tuple[int, str]]] = [[] for _ in range(max(length - 1, 0))]
        for s, table in enumerate(links):
            for right in range(1, length):
                vote = table.vote(doc_i, sent_i, right)
                if vote is not None:
                    link_votes[right - 1].append((s, vote))
        compiled.append(SentenceVotes(doc=doc_i, sent=sent_i, length=length,
                                      token_votes=token_votes, link_votes=link_votes))
    return compiled


def init_generative(matrix: LabelMatrix, tags: TagSet, init_acc: float,
                    acc_prior: float, balance_prior: float) -> GenerativeModel:
    """Prior-mode chain parameters plus empirical vote propensities."""
    if not 0.5 < init_acc < 1.0:
        raise DataError(f"init_acc must be in (0.5, 1), got {init_acc}")
    if acc_prior < 0.0 or balance_prior < 0.0:
        raise DataError("acc_prior and balance_prior must be >= 0")
    n_tags = len(tags)
    n_rules = len(matrix.rules)
    n_tokens = matrix.corpus.token_count
    pi = np.ones(n_tags)
    pi[0] += balance_prior
    pi /= pi.sum()
    trans = np.ones((n_tags, n_tags))
    trans[:, 0] += balance_prior
    trans /= trans.sum(axis=1, keepdims=True)
    theta = np.full(n_rules, float(init_acc))
    votes_per_rule = np.zeros(n_rules)
    for (_, j) in matrix.votes:
        votes_per_rule[j] += 1.0
    rho = np.repeat(((votes_per_rule + 1.0) / (n_tokens + 2.0))[:, None], n_tags, axis=1)
    return GenerativeModel(tags=tags, pi=pi, trans=trans, theta=theta, rho=rho,
                           link_acc=np.zeros(0), init_acc=float(init_acc),
                           acc_prior=float(acc_prior), balance_prior=float(balance_prior))


# ---------------------------------------------------------------------------
# Potentials


def _emission_log(model: GenerativeModel, sv: SentenceVotes) -> np.ndarray:
    n_tags = len(model.tags)
    log_rho = np.log(model.rho)
    log_1m_rho = np.log1p(-model.rho)
    base = log_1m_rho.sum(axis=0)
    log_em = np.tile(base, (sv.length, 1))
    log_theta = np.log(model.theta)
    log_wrong = np.log1p(-model.theta) - np.log(n_tags - 1)
    for t, votes in enumerate(sv.token_votes):
        for j, v in votes:
            log_em[t] += log_rho[j] - log_1m_rho[j]
            adjust = np.full(n_tags, log_wrong[j])
            adjust[v] = log_theta[j]
            log_em[t] += adjust
    return log_em


def _transition_logs(model: GenerativeModel, sv: SentenceVotes) -> np.ndarray:
    base = np.log(model.trans)
    out = np.tile(base, (max(sv.length - 1, 0), 1, 1))
    n_tags = len(model.tags)
    eye = np.eye(n_tags, dtype=bool)
    for b, votes in enumerate(sv.link_votes):
        for s, vote in votes:
            acc = model.link_acc[s]
            same = np.log(acc) if vote == LINK else np.log1p(-acc)
            diff = np.log1p(-acc) if vote == LINK else np.log(acc)
            out[b] += np.where(eye, same, diff)
    return out


def _forward(log_pi: np.ndarray, log_em: np.ndarray,
             log_a: np.ndarray) -> tuple[np.ndarray, float]:
    length = log_em.shape[0]
    la = np.empty_like(log_em)
    la[0] = log_pi + log_em[0]
    for t in range(1, length):
        la[t] = logsumexp(la[t - 1][:, None] + log_a[t - 1], axis=0) + log_em[t]
    return la, float(logsumexp(la[-1]))


def _backward(log_em: np.ndarray, log_a: np.ndarray) -> np.ndarray:
    length = log_em.shape[0]
    lb = np.zeros_like(log_em)
    for t in range(length - 2, -1, -1):
        lb[t] = logsumexp(log_a[t] + (log_em[t + 1] + lb[t + 1])[None, :], axis=1)
    return lb


def forward_loglik(model: GenerativeModel, sv: SentenceVotes) -> float:
    log_em = _emission_log(model, sv)
    log_a = _transition_logs(model, sv)
    _, loglik = _forward(np.log(model.pi), log_em, log_a)
    return loglik


def _posteriors(model: GenerativeModel,
                sv: SentenceVotes) -> tuple[float, np.ndarray, np.ndarray]:
    """Log-likelihood, token marginals gamma, and boundary marginals xi."""
    log_em = _emission_log(model, sv)
    log_a = _transition_logs(model, sv)
    la, loglik = _forward(np.log(model.pi), log_em, log_a)
    lb = _backward(log_em, log_a)
    lg = la + lb
    gamma = np.exp(lg - logsumexp(lg, axis=1, keepdims=True))
    xi = np.zeros((max(sv.length - 1, 0), len(model.tags), len(model.tags)))
    for t in range(sv.length - 1):
        lx = la[t][:, None] + log_a[t] + (log_em[t + 1] + lb[t + 1])[None, :]
        xi[t] = np.exp(lx - logsumexp(lx))
    return loglik, gamma, xi


# ---------------------------------------------------------------------------
# EM


def _log_prior(model: GenerativeModel) -> float:
    a = model.acc_prior * model.init_acc
    b = model.acc_prior * (1.0 - model.init_acc)
    total = float(np.sum(a * np.log(model.theta) + b * np.log1p(-model.theta)))
    if model.link_acc.size:
        total += float(np.sum(a * np.log(model.link_acc) + b * np.log1p(-model.link_acc)))
    total += float(np.sum(np.log(model.rho) + np.log1p(-model.rho)))
    total += float(np.sum(np.log(model.pi)) + model.balance_prior * np.log(model.pi[0]))
    total += float(np.sum(np.log(model.trans))
                   + model.balance_prior * np.sum(np.log(model.trans[:, 0])))
    return total


def fit_em(model: GenerativeModel, matrix: LabelMatrix,
           links: Sequence[LinkVoteTable], epochs: int) -> tuple[GenerativeModel, list[float]]:
    """MAP-EM; the trace holds the log-posterior entering each epoch.

    Non-decreasing trace up to floating point; NumericError on a sentence
    whose likelihood degenerates.
    """
    if epochs < 0:
        raise DataError(f"epochs must be >= 0, got {epochs}")
    sentences = compile_votes(matrix, links, model.tags)
    n_tags = len(model.tags)
    n_rules = len(matrix.rules)
    n_sources = len(links)
    link_acc = model.link_acc
    if link_acc.size != n_sources:
        link_acc = np.full(n_sources, model.init_acc)
    model = GenerativeModel(tags=model.tags, pi=model.pi.copy(), trans=model.trans.copy(),
                            theta=model.theta.copy(), rho=model.rho.copy(),
                            link_acc=link_acc, init_acc=model.init_acc,
                            acc_prior=model.acc_prior, balance_prior=model.balance_prior)
    trace: list[float] = []
    bal = model.balance_prior
    a_prior = model.acc_prior * model.init_acc
    prior_strength = model.acc_prior
    for _ in range(epochs):
        pi_counts = np.zeros(n_tags)
        trans_counts = np.zeros((n_tags, n_tags))
        correct = np.zeros(n_rules)
        wrong = np.zeros(n_rules)
        vote_mass = np.zeros((n_rules, n_tags))
        tag_mass = np.zeros(n_tags)
        link_agree = np.zeros(n_sources)
        link_total = np.zeros(n_sources)
        total_loglik = 0.0
        for sv in sentences:
            loglik, gamma, xi = _posteriors(model, sv)
            if not np.isfinite(loglik):
                raise NumericError(f"non-finite log-likelihood at doc={sv.doc} sent={sv.sent}")
            total_loglik += loglik
            pi_counts += gamma[0]
            trans_counts += xi.sum(axis=0)
            tag_mass += gamma.sum(axis=0)
            for t, votes in enumerate(sv.token_votes):
                for j, v in votes:
                    correct[j] += gamma[t, v]
                    wrong[j] += 1.0 - gamma[t, v]
                    vote_mass[j] += gamma[t]
            for b, votes in enumerate(sv.link_votes):
                same = float(np.trace(xi[b]))
                for s, vote in votes:
                    link_agree[s] += same if vote == LINK else 1.0 - same
                    link_total[s] += 1.0
        trace.append(total_loglik + _log_prior(model))

        new_theta = model.theta.copy()
        denom = correct + wrong + prior_strength
        has_evidence = denom > 0.0
        new_theta[has_evidence] = (correct[has_evidence] + a_prior) / denom[has_evidence]
        model.theta = np.clip(new_theta, 1e-9, 1.0 - 1e-9)

        model.rho = (vote_mass + 1.0) / (tag_mass[None, :] + 2.0)

        pi = pi_counts + 1.0
        pi[0] += bal
        model.pi = pi / pi.sum()
        trans = trans_counts + 1.0
        trans[:, 0] += bal
        model.trans = trans / trans.sum(axis=1, keepdims=True)

        if n_sources:
            new_link = model.link_acc.copy()
            denom = link_total + prior_strength
            has_evidence = denom > 0.0
            new_link[has_evidence] = (link_agree[has_evidence] + a_prior) / denom[has_evidence]
            model.link_acc = np.clip(new_link, 1e-9, 1.0 - 1e-9)
    return model, trace


# ---------------------------------------------------------------------------
# Inference


@dataclass
class TokenMarginals:
    corpus: Corpus
    tags: TagSet
    probs: np.ndarray  # (token_count, T)


def posterior_marginals(model: GenerativeModel, matrix: LabelMatrix,
                        links: Sequence[LinkVoteTable]) -> TokenMarginals:
    model = _with_link_sources(model, len(links))
    probs = np.zeros((matrix.corpus.token_count, len(model.tags)))
    for sv in compile_votes(matrix, links, model.tags):
        _, gamma, _ = _posteriors(model, sv)
        base = matrix.corpus.sentence_offset(sv.doc, sv.sent)
        probs[base:base + sv.length] = gamma
    return TokenMarginals(corpus=matrix.corpus, tags=model.tags, probs=probs)


def viterbi_decode(model: GenerativeModel, matrix: LabelMatrix,
                   links: Sequence[LinkVoteTable]) -> list[tuple[int, int, list[str]]]:
    """Most likely tag sequence per sentence; ties break toward lower tag index."""
    model = _with_link_sources(model, len(links))
    out = []
    for sv in compile_votes(matrix, links, model.tags):
        log_em = _emission_log(model, sv)
        log_a = _transition_logs(model, sv)
        delta = np.log(model.pi) + log_em[0]
        back = np.zeros((sv.length, len(model.tags)), dtype=np.int64)
        for t in range(1, sv.length):
            scores = delta[:, None] + log_a[t - 1]
            back[t] = np.argmax(scores, axis=0)
            delta = scores[back[t], np.arange(len(model.tags))] + log_em[t]
        path = [int(np.argmax(delta))]
        for t in range(sv.length - 1, 0, -1):
            path.append(int(back[t][path[-1]]))
        path.reverse()
        out.append((sv.doc, sv.sent, [model.tags.tags[i] for i in path]))
    return out


def _with_link_sources(model: GenerativeModel, n_sources: int) -> GenerativeModel:
    # Fewer sources than the model was fit with is fine (the extra
    # accuracies just go unused, e.g. decoding a split with no link votes).
    if model.link_acc.size >= n_sources:
        return model
    if model.link_acc.size == 0:
        return GenerativeModel(tags=model.tags, pi=model.pi, trans=model.trans,
                               theta=model.theta, rho=model.rho,
                               link_acc=np.full(n_sources, model.init_acc),
                               init_acc=model.init_acc, acc_prior=model.acc_prior,
                               balance_prior=model.balance_prior)
    raise DataError(
        f"model was fit with {model.link_acc.size} link sources, got {n_sources}"
    )


def sequence_likelihood_bruteforce(model: GenerativeModel, matrix: LabelMatrix,
                                   links: Sequence[LinkVoteTable],
                                   sentence: tuple[int, int]) -> float:
    """Log of the sum over all tag sequences of the joint probability.

    Exponential enumeration; refuses sentences longer than 10 tokens.
    """
    model = _with_link_sources(model, len(links))
    target = None
    for sv in compile_votes(matrix, links, model.tags):
        if (sv.doc, sv.sent) == sentence:
            target = sv
            break
    if target is None:
        raise DataError(f"no sentence doc={sentence[0]} sent={sentence[1]}")
    if target.length > 10:
        raise DataError(f"sentence too long for brute force ({target.length} tokens)")
    log_em = _emission_log(model, target)
    log_a = _transition_logs(model, target)
    log_pi = np.log(model.pi)
    n_tags = len(model.tags)
    joint_logs = []
    for seq in itertools.product(range(n_tags), repeat=target.length):
        lp = log_pi[seq[0]] + log_em[0, seq[0]]
        for t in range(1, target.length):
            lp += log_a[t - 1][seq[t - 1], seq[t]] + log_em[t, seq[t]]
        joint_logs.append(lp)
    return float(logsumexp(np.asarray(joint_logs)))


# ---------------------------------------------------------------------------
# Span export


def decode_spans(tag_names: Sequence[str], breaks: frozenset[int] | set[int] = frozenset()) -> list[Span]:
    """Maximal same-label runs of IO tags as spans; a BREAK boundary splits a run.

    `breaks` holds right-token indices r meaning a break between r-1 and r.
    """
    spans: list[Span] = []
    start: Optional[int] = None
    label: Optional[str] = None
    for i, tag in enumerate(tag_names):
        boundary = i in breaks
        if tag == "O":
            if start is not None:
                spans.append((start, i, label))  # type: ignore[arg-type]
                start, label = None, None
            continue
        if start is not None and (tag != label or boundary):
            spans.append((start, i, label))  # type: ignore[arg-type]
            start, label = None, None
        if start is None:
            start, label = i, tag
    if start is not None:
        spans.append((start, len(tag_names), label))  # type: ignore[arg-type]
    return spans


def save_marginals(marginals: TokenMarginals, path: str) -> None:
    corpus = marginals.corpus
    with open(path, "w", encoding="utf-8") as fh:
        for doc_i, sent_i, sentence in corpus.sentences():
            base = corpus.sentence_offset(doc_i, sent_i)
            for t in range(len(sentence.tokens)):
                row = marginals.probs[base + t]
                cell = ",".join(f"{tag}:{row[i]:.4f}"
                                for i, tag in enumerate(marginals.tags.tags))
                fh.write(f"{doc_i}\t{sent_i}\t{t}\t{cell}\n")


# ---------------------------------------------------------------------------
# Serialization (magic GLGM)


def save_generative_model(model: GenerativeModel, path: str) -> None:
    with open(path, "wb") as fh:
        binio.write_magic(fh, MAGIC, VERSION)
        binio.write_u32(fh, len(model.tags))
        binio.write_u32(fh, model.n_rules)
        binio.write_u32(fh, model.link_acc.size)
        for tag in model.tags.tags:
            binio.write_str(fh, tag)
        binio.write_f32_array(fh, model.pi)
        binio.write_f32_array(fh, model.trans)
        binio.write_f32_array(fh, model.theta)
        binio.write_f32_array(fh, model.rho)
        binio.write_f32_array(fh, model.link_acc)
        binio.write_f32_array(fh, np.array([model.init_acc, model.acc_prior,
                                            model.balance_prior]))


def load_generative_model(path: str) -> GenerativeModel:
    with open(path, "rb") as fh:
        version = binio.read_magic(fh, MAGIC, path)
        if version != VERSION:
            raise DataError(f"{path}: unsupported version {version}")
        n_tags = binio.read_u32(fh, path)
        n_rules = binio.read_u32(fh, path)
        n_sources = binio.read_u32(fh, path)
        tags = TagSet(tags=tuple(binio.read_str(fh, path) for _ in range(n_tags)))
        pi = binio.read_f32_array(fh, n_tags, path)
        trans = binio.read_f32_array(fh, n_tags * n_tags, path).reshape(n_tags, n_tags)
        theta = binio.read_f32_array(fh, n_rules, path)
        rho = binio.read_f32_array(fh, n_rules * n_tags, path).reshape(n_rules, n_tags)
        link_acc = binio.read_f32_array(fh, n_sources, path)
        priors = binio.read_f32_array(fh, 3, path)
        extra = fh.read(1)
        if extra:
            raise DataError(f"{path}: trailing bytes after parameters")
    return GenerativeModel(tags=tags, pi=pi, trans=trans, theta=theta, rho=rho,
                           link_acc=link_acc, init_acc=float(priors[0]),
                           acc_prior=float(priors[1]), balance_prior=float(priors[2]))
