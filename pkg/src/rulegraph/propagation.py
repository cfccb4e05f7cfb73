"""Label propagation over the rule similarity graph.

Candidate rules become nodes of a k-NN cosine graph.  A two-layer
multi-head graph attention network, trained full-batch with hand-derived
backpropagation (no autodiff), scores each node with the probability that
the rule belongs to the target entity class.  Seeded positive/negative
rules supply supervision; two regularizers shape the final embeddings:

  l_sup   mean binary cross-entropy over seed nodes
  l_reg   lambda_reg  * mean over undirected edges of ||h*_i - h*_j||_2
  l_dist  lambda_dist * cosine similarity of the positive/negative seed centroids

Per layer and head, with z_i = W h_i and attention vector a = [a1; a2]:

  e_ij   = LeakyReLU(a1.z_i + a2.z_j)         over j in N(i) + {i}
  alpha_i. = softmax_j(e_ij)
  h'_i   = sum_j alpha_ij z_j                 (default)
         = alpha_ii z_i + sum_{j in N(i)} z_j (unweighted_neighbor_sum)

The hidden layer concatenates heads (or averages them when
average_heads_hidden is set); the final layer always averages.  An ELU sits
between the layers; dropout hits inputs and attention weights only while
training.  All arrays are float64 in memory; model files store f32.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.special import expit

from . import binio
from .errors import DataError, NumericError
from .optim import Adam
from .rules import Polarity, Rule, RuleKind, RuleSet

logger = logging.getLogger(__name__)

MAGIC = b"GLPM"
VERSION = 1


@dataclass(frozen=True)
class GatConfig:
    heads: int = 3
    hidden: int = 64
    out_dim: int = 64
    dropout: float = 0.5
    negative_slope: float = 0.2
    learning_rate: float = 1e-4
    lambda_reg: float = 1.0
    lambda_dist: float = 1.0
    unweighted_neighbor_sum: bool = False
    average_heads_hidden: bool = False

    def __post_init__(self) -> None:
        if self.heads < 1:
            raise DataError(f"heads must be >= 1, got {self.heads}")
        if self.hidden < 1 or self.out_dim < 1:
            raise DataError("hidden and out_dim must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise DataError(f"dropout must be in [0, 1), got {self.dropout}")


# ---------------------------------------------------------------------------
# Graph


@dataclass
class RuleGraph:
    rules: list[Rule]
    embeddings: np.ndarray          # (n, dim) float64
    neighbors: list[tuple[int, ...]]  # symmetric, sorted, no self loops
    seed_pos: tuple[int, ...]
    seed_neg: tuple[int, ...]
    k: int

    @property
    def n_nodes(self) -> int:
        return len(self.rules)

    def undirected_edges(self) -> np.ndarray:
        pairs = sorted({(min(i, j), max(i, j))
                        for i, nbrs in enumerate(self.neighbors) for j in nbrs})
        return np.asarray(pairs, dtype=np.int64).reshape(len(pairs), 2)

    def edge_csr(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Flat edge list grouped by source; each segment ends with the self edge.

        Returns (indptr, src, dst, is_self).
        """
        src, dst, is_self = [], [], []
        indptr = [0]
        for i, nbrs in enumerate(self.neighbors):
            for j in nbrs:
                src.append(i)
                dst.append(j)
                is_self.append(False)
            src.append(i)
            dst.append(i)
            is_self.append(True)
            indptr.append(len(src))
        return (np.asarray(indptr, dtype=np.int64), np.asarray(src, dtype=np.int64),
                np.asarray(dst, dtype=np.int64), np.asarray(is_self, dtype=bool))


def build_rule_graph(rules: RuleSet, embeddings: Mapping[Rule, np.ndarray],
                     seeds: RuleSet, k: int) -> RuleGraph:
    """k-NN cosine graph over candidate rules plus seed rules.

    Node identity is (kind, key); a seed sharing its key with a candidate
    claims that node.  Similarity ties break toward the lower node index,
    and the directed k-NN edge set is symmetrized by union.
    """
    nodes: list[Rule] = []
    by_key: dict[tuple[RuleKind, str], int] = {}
    for rule in rules:
        if (rule.kind, rule.key) in by_key:
            continue
        by_key[(rule.kind, rule.key)] = len(nodes)
        nodes.append(rule)
    seed_pos: list[int] = []
    seed_neg: list[int] = []
    seen_polarity: dict[int, Polarity] = {}
    for seed in seeds:
        idx = by_key.get((seed.kind, seed.key))
        if idx is None:
            idx = len(nodes)
            by_key[(seed.kind, seed.key)] = idx
            nodes.append(seed)
        else:
            nodes[idx] = seed  # seed identity (polarity) wins over the candidate copy
        if idx in seen_polarity and seen_polarity[idx] is not seed.polarity:
            raise DataError(f"seed key {seed.key!r} appears with both polarities")
        seen_polarity[idx] = seed.polarity
        (seed_pos if seed.polarity is Polarity.POSITIVE else seed_neg).append(idx)

    n = len(nodes)
    if n == 0:
        raise DataError("cannot build a rule graph with no nodes")
    if k >= n:
        raise DataError(f"k={k} must be smaller than the node count {n}")
    # matching ignores label/polarity, so embeddings resolve by (kind, key)
    by_kk = {(r.kind, r.key): np.asarray(v, dtype=np.float64)
             for r, v in embeddings.items()}
    for rule in nodes:
        if (rule.kind, rule.key) not in by_kk:
            raise DataError(
                f"no embedding for node ({rule.kind.value}, {rule.key!r}); "
                "every graph node needs one"
            )
    vectors = np.stack([by_kk[(rule.kind, rule.key)] for rule in nodes])

    norms = np.linalg.norm(vectors, axis=1)
    unit = vectors / np.where(norms > 0.0, norms, 1.0)[:, None]
    sims = unit @ unit.T
    np.fill_diagonal(sims, -np.inf)
    directed: set[tuple[int, int]] = set()
    index = np.arange(n)
    for i in range(n):
        # stable order: similarity descending, then lower node index
        order = np.lexsort((index, -sims[i]))
        for j in order[:k]:
            directed.add((i, int(j)))
    neighbor_sets: list[set[int]] = [set() for _ in range(n)]
    for i, j in directed:
        neighbor_sets[i].add(j)
        neighbor_sets[j].add(i)
    neighbors = [tuple(sorted(s)) for s in neighbor_sets]
    return RuleGraph(rules=nodes, embeddings=vectors, neighbors=neighbors,
                     seed_pos=tuple(sorted(set(seed_pos))),
                     seed_neg=tuple(sorted(set(seed_neg))), k=k)


def save_graph(graph: RuleGraph, path: str) -> None:
    record = {
        "k": graph.k,
        "rules": [[r.kind.value, r.key, r.label, r.polarity.value] for r in graph.rules],
        "neighbors": [list(nbrs) for nbrs in graph.neighbors],
        "seed_pos": list(graph.seed_pos),
        "seed_neg": list(graph.seed_neg),
        "embeddings": [[float(x) for x in row] for row in graph.embeddings],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_graph(path: str) -> RuleGraph:
    with open(path, encoding="utf-8") as fh:
        try:
            record = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc.msg})") from None
    try:
        rules = [Rule(kind=RuleKind(k), key=key, label=label, polarity=Polarity(pol))
                 for k, key, label, pol in record["rules"]]
        graph = RuleGraph(
            rules=rules,
            embeddings=np.asarray(record["embeddings"], dtype=np.float64),
            neighbors=[tuple(int(j) for j in nbrs) for nbrs in record["neighbors"]],
            seed_pos=tuple(int(i) for i in record["seed_pos"]),
            seed_neg=tuple(int(i) for i in record["seed_neg"]),
            k=int(record["k"]),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"{path}: malformed graph file ({exc})") from None
    return graph


# ---------------------------------------------------------------------------
# Model


@dataclass
class PropagationModel:
    config: GatConfig
    in_dim: int
    w1: list[np.ndarray]   # per head: (hidden, in_dim)
    a1: list[np.ndarray]   # per head: (2*hidden,)
    w2: list[np.ndarray]   # per head: (out_dim, hidden_total)
    a2: list[np.ndarray]   # per head: (2*out_dim,)
    wc: np.ndarray         # (out_dim,)
    bc: float

    @property
    def hidden_total(self) -> int:
        cfg = self.config
        return cfg.hidden if cfg.average_heads_hidden else cfg.hidden * cfg.heads

    @classmethod
    def init(cls, in_dim: int, config: GatConfig, seed: int) -> "PropagationModel":
        """Glorot-uniform parameters, drawn in flattening order."""
        rng = np.random.default_rng(seed)

        def glorot(shape: tuple[int, ...]) -> np.ndarray:
            fan = sum(shape) if len(shape) > 1 else shape[0] + 1
            s = np.sqrt(6.0 / fan)
            return rng.uniform(-s, s, size=shape)

        hidden_total = config.hidden if config.average_heads_hidden \
            else config.hidden * config.heads
        w1, a1, w2, a2 = [], [], [], []
        for _ in range(config.heads):
            w1.append(glorot((config.hidden, in_dim)))
            a1.append(glorot((2 * config.hidden,)))
        for _ in range(config.heads):
            w2.append(glorot((config.out_dim, hidden_total)))
            a2.append(glorot((2 * config.out_dim,)))
        wc = glorot((config.out_dim,))
        bc = 0.0
        return cls(config=config, in_dim=in_dim, w1=w1, a1=a1, w2=w2, a2=a2, wc=wc, bc=bc)

    def flatten(self) -> np.ndarray:
        parts = []
        for k in range(self.config.heads):
            parts.extend([self.w1[k].ravel(), self.a1[k]])
        for k in range(self.config.heads):
            parts.extend([self.w2[k].ravel(), self.a2[k]])
        parts.append(self.wc)
        parts.append(np.array([self.bc]))
        return np.concatenate(parts)

    def with_params(self, flat: np.ndarray) -> "PropagationModel":
        cfg = self.config
        w1, a1, w2, a2 = [], [], [], []
        pos = 0

        def take(shape: tuple[int, ...]) -> np.ndarray:
            nonlocal pos
            n = int(np.prod(shape))
            out = np.asarray(flat[pos:pos + n], dtype=np.float64).reshape(shape).copy()
            pos += n
            return out

        for _ in range(cfg.heads):
            w1.append(take((cfg.hidden, self.in_dim)))
            a1.append(take((2 * cfg.hidden,)))
        for _ in range(cfg.heads):
            w2.append(take((cfg.out_dim, self.hidden_total)))
            a2.append(take((2 * cfg.out_dim,)))
        wc = take((cfg.out_dim,))
        bc = float(take((1,))[0])
        if pos != flat.size:
            raise DataError(f"parameter vector has {flat.size} entries, expected {pos}")
        return PropagationModel(config=cfg, in_dim=self.in_dim,
                                w1=w1, a1=a1, w2=w2, a2=a2, wc=wc, bc=bc)


# ---------------------------------------------------------------------------
# Forward pass


def _leaky(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0.0, x, slope * x)


def _leaky_grad(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0.0, 1.0, slope)


def _elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, x, np.expm1(np.minimum(x, 0.0)))


def _elu_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, 1.0, np.exp(np.minimum(x, 0.0)))


def _segment_softmax(e: np.ndarray, indptr: np.ndarray, counts: np.ndarray) -> np.ndarray:
    seg_max = np.maximum.reduceat(e, indptr[:-1])
    shifted = np.exp(e - np.repeat(seg_max, counts))
    seg_sum = np.add.reduceat(shifted, indptr[:-1])
    return shifted / np.repeat(seg_sum, counts)


def _head_forward(H: np.ndarray, w: np.ndarray, a: np.ndarray, edges: tuple,
                  cfg: GatConfig, att_mask: Optional[np.ndarray]) -> tuple[np.ndarray, dict]:
    indptr, src, dst, is_self = edges
    counts = np.diff(indptr)
    dout = w.shape[0]
    z = H @ w.T
    s = z @ a[:dout]
    t = z @ a[dout:]
    e_raw = s[src] + t[dst]
    e = _leaky(e_raw, cfg.negative_slope)
    alpha = _segment_softmax(e, indptr, counts)
    alpha_used = alpha if att_mask is None else alpha * att_mask
    if cfg.unweighted_neighbor_sum:
        weight = np.where(is_self, alpha_used, 1.0)
    else:
        weight = alpha_used
    out = np.zeros((H.shape[0], dout))
    np.add.at(out, src, weight[:, None] * z[dst])
    cache = {"H": H, "z": z, "e_raw": e_raw, "alpha": alpha, "alpha_used": alpha_used,
             "weight": weight, "att_mask": att_mask}
    return out, cache


def _head_backward(d_out: np.ndarray, w: np.ndarray, a: np.ndarray, edges: tuple,
                   cfg: GatConfig, cache: dict) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    indptr, src, dst, is_self = edges
    counts = np.diff(indptr)
    dout = w.shape[0]
    H, z = cache["H"], cache["z"]
    alpha, alpha_used, weight = cache["alpha"], cache["alpha_used"], cache["weight"]

    d_edge = np.einsum("ed,ed->e", d_out[src], z[dst])
    dz = np.zeros_like(z)
    np.add.at(dz, dst, weight[:, None] * d_out[src])
    if cfg.unweighted_neighbor_sum:
        d_alpha_used = np.where(is_self, d_edge, 0.0)
    else:
        d_alpha_used = d_edge
    att_mask = cache["att_mask"]
    d_alpha = d_alpha_used if att_mask is None else d_alpha_used * att_mask

    # softmax backward per segment
    seg_dot = np.add.reduceat(alpha * d_alpha, indptr[:-1])
    d_e = alpha * (d_alpha - np.repeat(seg_dot, counts))
    d_e_raw = d_e * _leaky_grad(cache["e_raw"], cfg.negative_slope)

    d_s = np.add.reduceat(d_e_raw, indptr[:-1])
    d_t = np.zeros(z.shape[0])
    np.add.at(d_t, dst, d_e_raw)
    d_a = np.concatenate([z.T @ d_s, z.T @ d_t])
    dz += d_s[:, None] * a[None, :dout] + d_t[:, None] * a[None, dout:]

    d_w = dz.T @ H
    d_H = dz @ w
    return d_w, d_a, d_H


@dataclass
class GatOutputs:
    h_star: np.ndarray                       # (n, out_dim)
    p: np.ndarray                            # (n,)
    logits: np.ndarray                       # (n,)
    attention: list[list[np.ndarray]]        # [layer][head] pre-dropout alpha, edge-aligned
    cache: dict = field(repr=False, default_factory=dict)


def gat_forward(model: PropagationModel, graph: RuleGraph, training: bool = False,
                rng_seed: int = 0) -> GatOutputs:
    """Full forward pass; caches every intermediate needed by the backward pass.

    Dropout masks (inputs and attention) are drawn only when training with
    dropout > 0, in a fixed order from default_rng(rng_seed), so a forward
    pass is a deterministic function of (model, graph, training, rng_seed).
    """
    cfg = model.config
    if graph.embeddings.shape[1] != model.in_dim:
        raise DataError(
            f"graph embedding dim {graph.embeddings.shape[1]} != model in_dim {model.in_dim}"
        )
    edges = graph.edge_csr()
    n_edges = edges[1].shape[0]
    use_dropout = training and cfg.dropout > 0.0
    rng = np.random.default_rng(rng_seed) if use_dropout else None
    keep = 1.0 - cfg.dropout

    def draw_mask(shape) -> Optional[np.ndarray]:
        if rng is None:
            return None
        return (rng.random(shape) < keep).astype(np.float64) / keep

    H0 = np.asarray(graph.embeddings, dtype=np.float64)
    mask_in = draw_mask(H0.shape)
    H0d = H0 if mask_in is None else H0 * mask_in

    heads1, caches1, att1 = [], [], []
    for k in range(cfg.heads):
        att_mask = draw_mask(n_edges)
        out, cache = _head_forward(H0d, model.w1[k], model.a1[k], edges, cfg, att_mask)
        heads1.append(out)
        caches1.append(cache)
        att1.append(cache["alpha"])
    if cfg.average_heads_hidden:
        C = np.mean(heads1, axis=0)
    else:
        C = np.concatenate(heads1, axis=1)
    E_act = _elu(C)
    mask_hidden = draw_mask(E_act.shape)
    H1 = E_act if mask_hidden is None else E_act * mask_hidden

    heads2, caches2, att2 = [], [], []
    for k in range(cfg.heads):
        att_mask = draw_mask(n_edges)
        out, cache = _head_forward(H1, model.w2[k], model.a2[k], edges, cfg, att_mask)
        heads2.append(out)
        caches2.append(cache)
        att2.append(cache["alpha"])
    h_star = np.mean(heads2, axis=0)

    logits = h_star @ model.wc + model.bc
    p = expit(logits)
    cache = {"edges": edges, "caches1": caches1, "caches2": caches2,
             "C": C, "mask_hidden": mask_hidden}
    return GatOutputs(h_star=h_star, p=p, logits=logits,
                      attention=[att1, att2], cache=cache)


# ---------------------------------------------------------------------------
# Loss


@dataclass(frozen=True)
class LossBreakdown:
    l_sup: float
    l_reg: float
    l_dist: float

    @property
    def l_total(self) -> float:
        return self.l_sup + self.l_reg + self.l_dist


def _seed_targets(graph: RuleGraph) -> tuple[np.ndarray, np.ndarray]:
    if not graph.seed_pos or not graph.seed_neg:
        raise DataError("graph needs at least one positive and one negative seed; "
                        "centroids are undefined otherwise")
    idx = np.asarray(list(graph.seed_pos) + list(graph.seed_neg), dtype=np.int64)
    y = np.concatenate([np.ones(len(graph.seed_pos)), np.zeros(len(graph.seed_neg))])
    return idx, y


def compute_loss(model: PropagationModel, graph: RuleGraph,
                 outputs: GatOutputs) -> LossBreakdown:
    cfg = model.config
    idx, y = _seed_targets(graph)
    u = outputs.logits[idx]
    # BCE via softplus for numerical stability
    l_sup = float(np.mean(y * np.logaddexp(0.0, -u) + (1.0 - y) * np.logaddexp(0.0, u)))

    edges = graph.undirected_edges()
    if edges.shape[0]:
        diff = outputs.h_star[edges[:, 0]] - outputs.h_star[edges[:, 1]]
        l_reg = cfg.lambda_reg * float(np.mean(np.linalg.norm(diff, axis=1)))
    else:
        l_reg = 0.0

    c_pos = outputs.h_star[list(graph.seed_pos)].mean(axis=0)
    c_neg = outputs.h_star[list(graph.seed_neg)].mean(axis=0)
    l_dist = cfg.lambda_dist * float(_cos(c_pos, c_neg))
    return LossBreakdown(l_sup=l_sup, l_reg=l_reg, l_dist=l_dist)


def _cos(u: np.ndarray, v: np.ndarray, eps: float = 1e-30) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    return float(u @ v / max(nu * nv, eps))


def _loss_head_grads(model: PropagationModel, graph: RuleGraph,
                     outputs: GatOutputs) -> tuple[LossBreakdown, np.ndarray, np.ndarray]:
    """Loss plus its gradient w.r.t. h_star and the classifier logits."""
    cfg = model.config
    breakdown = compute_loss(model, graph, outputs)
    n = graph.n_nodes
    idx, y = _seed_targets(graph)

    d_logits = np.zeros(n)
    d_logits[idx] = (outputs.p[idx] - y) / idx.size
    # several seeds could share a node only if pos/neg overlapped, which
    # _seed_targets forbids implicitly (both lists are disjoint by build)

    d_h = np.zeros_like(outputs.h_star)
    edges = graph.undirected_edges()
    if edges.shape[0]:
        diff = outputs.h_star[edges[:, 0]] - outputs.h_star[edges[:, 1]]
        norms = np.linalg.norm(diff, axis=1)
        safe = norms > 1e-12
        scale = np.zeros_like(norms)
        scale[safe] = cfg.lambda_reg / (edges.shape[0] * norms[safe])
        contrib = diff * scale[:, None]
        np.add.at(d_h, edges[:, 0], contrib)
        np.add.at(d_h, edges[:, 1], -contrib)

    pos = np.asarray(graph.seed_pos)
    neg = np.asarray(graph.seed_neg)
    c_pos = outputs.h_star[pos].mean(axis=0)
    c_neg = outputs.h_star[neg].mean(axis=0)
    npos, nneg = np.linalg.norm(c_pos), np.linalg.norm(c_neg)
    if npos > 1e-12 and nneg > 1e-12:
        cos = float(c_pos @ c_neg / (npos * nneg))
        d_cpos = cfg.lambda_dist * (c_neg / (npos * nneg) - cos * c_pos / npos ** 2)
        d_cneg = cfg.lambda_dist * (c_pos / (npos * nneg) - cos * c_neg / nneg ** 2)
        d_h[pos] += d_cpos / pos.size
        d_h[neg] += d_cneg / neg.size
    return breakdown, d_h, d_logits


def loss_gradients(model: PropagationModel, graph: RuleGraph,
                   outputs: GatOutputs) -> tuple[LossBreakdown, np.ndarray]:
    """Analytic gradient of l_total w.r.t. every parameter, flattened.

    Reverses the cached forward pass: classifier -> head average ->
    layer 2 attention heads -> dropout -> ELU -> concat/average ->
    layer 1 attention heads.
    """
    cfg = model.config
    cache = outputs.cache
    if not cache:
        raise DataError("outputs carry no cache; call gat_forward first")
    breakdown, d_h, d_logits = _loss_head_grads(model, graph, outputs)

    # classifier
    d_wc = outputs.h_star.T @ d_logits
    d_bc = float(np.sum(d_logits))
    d_h = d_h + d_logits[:, None] * model.wc[None, :]

    edges = cache["edges"]
    d_w2, d_a2 = [], []
    d_H1 = np.zeros_like(cache["caches2"][0]["H"])
    for k in range(cfg.heads):
        dw, da, dH = _head_backward(d_h / cfg.heads, model.w2[k], model.a2[k],
                                    edges, cfg, cache["caches2"][k])
        d_w2.append(dw)
        d_a2.append(da)
        d_H1 += dH

    mask_hidden = cache["mask_hidden"]
    d_E = d_H1 if mask_hidden is None else d_H1 * mask_hidden
    d_C = d_E * _elu_grad(cache["C"])

    d_w1, d_a1 = [], []
    for k in range(cfg.heads):
        if cfg.average_heads_hidden:
            d_head = d_C / cfg.heads
        else:
            d_head = d_C[:, k * cfg.hidden:(k + 1) * cfg.hidden]
        dw, da, _ = _head_backward(d_head, model.w1[k], model.a1[k],
                                   edges, cfg, cache["caches1"][k])
        d_w1.append(dw)
        d_a1.append(da)

    parts = []
    for k in range(cfg.heads):
        parts.extend([d_w1[k].ravel(), d_a1[k]])
    for k in range(cfg.heads):
        parts.extend([d_w2[k].ravel(), d_a2[k]])
    parts.append(d_wc)
    parts.append(np.array([d_bc]))
    return breakdown, np.concatenate(parts)


# ---------------------------------------------------------------------------
# Training and selection


def train_propagation(model: PropagationModel, graph: RuleGraph, epochs: int,
                      rng_seed: int) -> tuple[PropagationModel, list[LossBreakdown]]:
    """Full-batch Adam on the total loss; returns the model and per-epoch log.

    Each log entry is the loss at the parameters entering that epoch,
    evaluated on the same (dropout-masked) pass used for the update.
    Deterministic: identical (model, graph, epochs, rng_seed) give
    bit-identical parameters.
    """
    if epochs < 0:
        raise DataError(f"epochs must be >= 0, got {epochs}")
    params = model.flatten()
    adam = Adam(params.size, lr=model.config.learning_rate)
    epoch_seeds = np.random.SeedSequence(rng_seed).generate_state(max(epochs, 1), dtype=np.uint32)
    log: list[LossBreakdown] = []
    current = model
    for epoch in range(epochs):
        outputs = gat_forward(current, graph, training=True, rng_seed=int(epoch_seeds[epoch]))
        breakdown, grads = loss_gradients(current, graph, outputs)
        if not np.isfinite(breakdown.l_total) or not np.all(np.isfinite(grads)):
            raise NumericError(f"non-finite loss or gradient at epoch {epoch}")
        log.append(breakdown)
        params = adam.step(params, grads)
        current = current.with_params(params)
    return current, log


@dataclass(frozen=True)
class SelectionConfig:
    m: int
    exclude_seeds: bool = True

    def __post_init__(self) -> None:
        if not 1 <= self.m <= 10000:
            raise DataError(f"selection size must be in 1..10000, got {self.m}")


def selection_scores(h_star: np.ndarray, seed_pos: Sequence[int],
                     seed_neg: Sequence[int]) -> np.ndarray:
    """cos_dist(h, neg centroid) - cos_dist(h, pos centroid), higher is better.

    Equals cos_sim(h, pos) - cos_sim(h, neg); invariant under positive
    rescaling of h_star.
    """
    c_pos = h_star[list(seed_pos)].mean(axis=0)
    c_neg = h_star[list(seed_neg)].mean(axis=0)
    norms = np.linalg.norm(h_star, axis=1)
    safe = np.where(norms > 0.0, norms, 1.0)
    unit = h_star / safe[:, None]

    def against(c: np.ndarray) -> np.ndarray:
        nc = np.linalg.norm(c)
        if nc <= 1e-30:
            return np.zeros(h_star.shape[0])
        return unit @ (c / nc)

    return against(c_pos) - against(c_neg)


def select_new_rules(model: PropagationModel, graph: RuleGraph,
                     cfg: SelectionConfig) -> list[Rule]:
    """Top-M candidates by centroid score; ties break toward lower node index."""
    if not graph.seed_pos or not graph.seed_neg:
        raise DataError("selection needs both seed centroids")
    outputs = gat_forward(model, graph, training=False)
    scores = selection_scores(outputs.h_star, graph.seed_pos, graph.seed_neg)
    excluded = set(graph.seed_pos) | set(graph.seed_neg) if cfg.exclude_seeds else set()
    eligible = [i for i in range(graph.n_nodes) if i not in excluded]
    if cfg.m > len(eligible):
        logger.warning("requested %d rules but only %d nodes are eligible",
                       cfg.m, len(eligible))
    ranked = sorted(eligible, key=lambda i: (-scores[i], i))[:cfg.m]
    return [replace(graph.rules[i], polarity=Polarity.POSITIVE) for i in ranked]


# ---------------------------------------------------------------------------
# Serialization (magic GLPM)


def save_propagation_model(model: PropagationModel, path: str) -> None:
    cfg = model.config
    with open(path, "wb") as fh:
        binio.write_magic(fh, MAGIC, VERSION)
        for value in (model.in_dim, cfg.hidden, cfg.out_dim, cfg.heads):
            binio.write_u32(fh, value)
        flags = (1 if cfg.unweighted_neighbor_sum else 0) | \
                (2 if cfg.average_heads_hidden else 0)
        binio.write_u32(fh, flags)
        binio.write_f32_array(fh, np.array([cfg.dropout, cfg.negative_slope,
                                            cfg.learning_rate, cfg.lambda_reg,
                                            cfg.lambda_dist]))
        binio.write_f32_array(fh, model.flatten())


def load_propagation_model(path: str) -> PropagationModel:
    with open(path, "rb") as fh:
        version = binio.read_magic(fh, MAGIC, path)
        if version != VERSION:
            raise DataError(f"{path}: unsupported version {version}")
        in_dim = binio.read_u32(fh, path)
        hidden = binio.read_u32(fh, path)
        out_dim = binio.read_u32(fh, path)
        heads = binio.read_u32(fh, path)
        flags = binio.read_u32(fh, path)
        hyper = binio.read_f32_array(fh, 5, path)
        cfg = GatConfig(heads=heads, hidden=hidden, out_dim=out_dim,
                        dropout=float(hyper[0]), negative_slope=float(hyper[1]),
                        learning_rate=float(hyper[2]), lambda_reg=float(hyper[3]),
                        lambda_dist=float(hyper[4]),
                        unweighted_neighbor_sum=bool(flags & 1),
                        average_heads_hidden=bool(flags & 2))
        template = PropagationModel.init(in_dim, cfg, seed=0)
        n_params = template.flatten().size
        flat = binio.read_f32_array(fh, n_params, path)
        extra = fh.read(1)
        if extra:
            raise DataError(f"{path}: trailing bytes after parameters")
    return template.with_params(flat)
