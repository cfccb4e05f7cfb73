"""Staged pipeline: config parsing, artifact management, stage runners.

Each stage reads its inputs from the output directory of earlier stages
and writes its own artifacts there, each with a `.meta.json` sidecar
recording the stage name, a hash of the resolved config, and the run
seed.  Reruns with the same config and inputs produce byte-identical
artifacts.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .corpus import (FIXED_PATTERN, Corpus, PosPattern, bio_to_spans,
                     extract_candidates, load_corpus, load_mentions,
                     mine_pos_patterns, save_mentions, spans_to_bio)
from .discriminative import load_crf_model, predict_crf, save_crf_model, train_crf
from .embed import (EmbeddingTable, hash_fallback_embed, load_embedding_table,
                    rule_embeddings, write_embedding_table)
from .errors import DataError
from .evaluation import (SpanScore, rule_accuracy_report, save_rule_report,
                         span_f1_from_spans)
from .generative import (TagSet, decode_spans, fit_em, init_generative,
                         load_generative_model, posterior_marginals,
                         save_generative_model, save_marginals, viterbi_decode)
from .labeling import (BREAK, LabelMatrix, LinkVoteTable, apply_rules,
                       load_label_matrix, load_link_votes, save_label_matrix)
from .propagation import (GatConfig, PropagationModel, SelectionConfig,
                          build_rule_graph, load_graph, load_propagation_model,
                          save_graph, save_propagation_model, select_new_rules,
                          train_propagation)
from .rules import (Polarity, RuleExtractionConfig, RuleKind, RuleSet,
                    extract_candidate_rules, load_seed_rules, match_many,
                    save_rules)

logger = logging.getLogger(__name__)

STAGES = ("extract", "graph", "propagate", "select", "apply",
          "fit-label-model", "train-tagger", "eval", "write-embeddings", "all")

THREADS_ENV = "RULEGRAPH_THREADS"


# ---------------------------------------------------------------------------
# Config


@dataclass(frozen=True)
class EmbeddingSettings:
    path: Optional[str] = None
    fallback: bool = True
    dim: int = 64
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise DataError(f"embeddings.dim must be >= 1, got {self.dim}")


@dataclass(frozen=True)
class ExtractionSettings:
    m_min: int = 3
    m_max: int = 6
    n_min: int = 1
    n_max: int = 3
    min_support: int = 2
    mined_patterns: int = 15

    def rule_config(self) -> RuleExtractionConfig:
        return RuleExtractionConfig(m_range=(self.m_min, self.m_max),
                                    n_range=(self.n_min, self.n_max),
                                    min_support=self.min_support)


@dataclass(frozen=True)
class KindSettings:
    enabled: bool = False
    num_new_rules: int = 10
    epochs: int = 100

    def __post_init__(self) -> None:
        if self.num_new_rules < 1:
            raise DataError(f"num_new_rules must be >= 1, got {self.num_new_rules}")
        if self.epochs < 0:
            raise DataError(f"epochs must be >= 0, got {self.epochs}")


@dataclass(frozen=True)
class PropagationSettings:
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
    kinds: tuple[tuple[str, KindSettings], ...] = ()

    def gat_config(self) -> GatConfig:
        return GatConfig(heads=self.heads, hidden=self.hidden, out_dim=self.out_dim,
                         dropout=self.dropout, negative_slope=self.negative_slope,
                         learning_rate=self.learning_rate, lambda_reg=self.lambda_reg,
                         lambda_dist=self.lambda_dist,
                         unweighted_neighbor_sum=self.unweighted_neighbor_sum,
                         average_heads_hidden=self.average_heads_hidden)

    def kind_settings(self, kind: str) -> KindSettings:
        for name, ks in self.kinds:
            if name == kind:
                return ks
        return KindSettings()

    def enabled_kinds(self) -> list[str]:
        return sorted(name for name, ks in self.kinds if ks.enabled)


@dataclass(frozen=True)
class GenerativeSettings:
    init_acc: float = 0.9
    acc_prior: float = 5.0
    balance_prior: float = 100.0
    em_epochs: int = 5

    def __post_init__(self) -> None:
        if self.em_epochs < 0:
            raise DataError(f"em_epochs must be >= 0, got {self.em_epochs}")


@dataclass(frozen=True)
class CrfSettings:
    enabled: bool = True
    learning_rate: float = 0.1
    l2: float = 1e-3
    epochs: int = 30
    soft_labels: bool = False


@dataclass(frozen=True)
class PipelineConfig:
    train_corpus: str
    seed_rules: str
    dev_corpus: Optional[str] = None
    test_corpus: Optional[str] = None
    link_votes: tuple[str, ...] = ()
    corpus_format: str = "jsonl"
    output_dir: str = "out"
    seed: int = 0
    report_mode: str = "exact"
    graph_k: int = 10
    embeddings: EmbeddingSettings = field(default_factory=EmbeddingSettings)
    extraction: ExtractionSettings = field(default_factory=ExtractionSettings)
    propagation: PropagationSettings = field(default_factory=PropagationSettings)
    selection_exclude_seeds: bool = True
    generative: GenerativeSettings = field(default_factory=GenerativeSettings)
    crf: CrfSettings = field(default_factory=CrfSettings)

    def __post_init__(self) -> None:
        if self.corpus_format not in ("jsonl", "conll-tsv"):
            raise DataError(f"unknown corpus_format {self.corpus_format!r}")
        if self.report_mode not in ("exact", "overlap"):
            raise DataError(f"unknown report_mode {self.report_mode!r}")
        if self.graph_k < 1:
            raise DataError(f"graph.k must be >= 1, got {self.graph_k}")

    def to_dict(self) -> dict:
        return {
            "train_corpus": self.train_corpus,
            "dev_corpus": self.dev_corpus,
            "test_corpus": self.test_corpus,
            "seed_rules": self.seed_rules,
            "link_votes": list(self.link_votes),
            "corpus_format": self.corpus_format,
            "output_dir": self.output_dir,
            "seed": self.seed,
            "report_mode": self.report_mode,
            "embeddings": {"path": self.embeddings.path,
                           "fallback": self.embeddings.fallback,
                           "dim": self.embeddings.dim,
                           "seed": self.embeddings.seed},
            "extraction": {"m_min": self.extraction.m_min,
                           "m_max": self.extraction.m_max,
                           "n_min": self.extraction.n_min,
                           "n_max": self.extraction.n_max,
                           "min_support": self.extraction.min_support,
                           "mined_patterns": self.extraction.mined_patterns},
            "graph": {"k": self.graph_k},
            "propagation": {
                "heads": self.propagation.heads,
                "hidden": self.propagation.hidden,
                "out_dim": self.propagation.out_dim,
                "dropout": self.propagation.dropout,
                "negative_slope": self.propagation.negative_slope,
                "learning_rate": self.propagation.learning_rate,
                "lambda_reg": self.propagation.lambda_reg,
                "lambda_dist": self.propagation.lambda_dist,
                "unweighted_neighbor_sum": self.propagation.unweighted_neighbor_sum,
                "average_heads_hidden": self.propagation.average_heads_hidden,
                "kinds": {name: {"enabled": ks.enabled,
                                 "num_new_rules": ks.num_new_rules,
                                 "epochs": ks.epochs}
                          for name, ks in self.propagation.kinds},
            },
            "selection": {"exclude_seeds": self.selection_exclude_seeds},
            "generative": {"init_acc": self.generative.init_acc,
                           "acc_prior": self.generative.acc_prior,
                           "balance_prior": self.generative.balance_prior,
                           "em_epochs": self.generative.em_epochs},
            "crf": {"enabled": self.crf.enabled,
                    "learning_rate": self.crf.learning_rate,
                    "l2": self.crf.l2,
                    "epochs": self.crf.epochs,
                    "soft_labels": self.crf.soft_labels},
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class _Section:
    """Dict wrapper that rejects unknown keys and checks value types."""

    def __init__(self, data: object, name: str) -> None:
        if not isinstance(data, dict):
            raise DataError(f"config section {name!r} must be a JSON object")
        self._data = dict(data)
        self._name = name

    def _describe(self, key: str) -> str:
        return f"{self._name}.{key}" if self._name else key

    def take(self, key: str, kind: type, default: object, optional: bool = False) -> object:
        if key not in self._data:
            return default
        value = self._data.pop(key)
        if value is None and optional:
            return None
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
            raise DataError(f"config key {self._describe(key)!r} must be {kind.__name__}")
        return value

    def take_section(self, key: str) -> "_Section":
        value = self._data.pop(key, {})
        return _Section(value, self._describe(key))

    def finish(self) -> None:
        if self._data:
            key = sorted(self._data)[0]
            raise DataError(f"unknown config key {self._describe(key)!r}")


def _resolve(path: Optional[str], base_dir: str) -> Optional[str]:
    if path is None:
        return None
    if os.path.isabs(path):
        return path
    return os.path.normpath(os.path.join(base_dir, path))


def parse_config(data: object, base_dir: str = ".") -> PipelineConfig:
    """Build a PipelineConfig from a JSON-shaped dict.

    Relative paths are resolved against base_dir.  Any key the schema
    does not define is an error, as is a wrongly typed value.
    """
    top = _Section(data, "")
    train = top.take("train_corpus", str, None)
    if train is None:
        raise DataError("config key 'train_corpus' is required")
    seed_rules = top.take("seed_rules", str, None)
    if seed_rules is None:
        raise DataError("config key 'seed_rules' is required")
    dev = top.take("dev_corpus", str, None, optional=True)
    test = top.take("test_corpus", str, None, optional=True)
    links_raw = top._data.pop("link_votes", [])
    if isinstance(links_raw, str):
        links_raw = [links_raw]
    if not isinstance(links_raw, list) or not all(isinstance(p, str) for p in links_raw):
        raise DataError("config key 'link_votes' must be a path or list of paths")

    emb = top.take_section("embeddings")
    embeddings = EmbeddingSettings(
        path=_resolve(emb.take("path", str, None, optional=True), base_dir),
        fallback=emb.take("fallback", bool, True),
        dim=emb.take("dim", int, 64),
        seed=emb.take("seed", int, None, optional=True),
    )
    emb.finish()

    ext = top.take_section("extraction")
    extraction = ExtractionSettings(
        m_min=ext.take("m_min", int, 3), m_max=ext.take("m_max", int, 6),
        n_min=ext.take("n_min", int, 1), n_max=ext.take("n_max", int, 3),
        min_support=ext.take("min_support", int, 2),
        mined_patterns=ext.take("mined_patterns", int, 15),
    )
    ext.finish()

    gsec = top.take_section("graph")
    graph_k = gsec.take("k", int, 10)
    gsec.finish()

    prop = top.take_section("propagation")
    kinds_raw = prop._data.pop("kinds", {})
    if not isinstance(kinds_raw, dict):
        raise DataError("config key 'propagation.kinds' must be a JSON object")
    valid_kinds = {k.value for k in RuleKind}
    kinds: list[tuple[str, KindSettings]] = []
    for name in sorted(kinds_raw):
        if name not in valid_kinds:
            raise DataError(f"unknown rule kind {name!r} in propagation.kinds")
        ksec = _Section(kinds_raw[name], f"propagation.kinds.{name}")
        kinds.append((name, KindSettings(
            enabled=ksec.take("enabled", bool, False),
            num_new_rules=ksec.take("num_new_rules", int, 10),
            epochs=ksec.take("epochs", int, 100),
        )))
        ksec.finish()
    propagation = PropagationSettings(
        heads=prop.take("heads", int, 3),
        hidden=prop.take("hidden", int, 64),
        out_dim=prop.take("out_dim", int, 64),
        dropout=prop.take("dropout", float, 0.5),
        negative_slope=prop.take("negative_slope", float, 0.2),
        learning_rate=prop.take("learning_rate", float, 1e-4),
        lambda_reg=prop.take("lambda_reg", float, 1.0),
        lambda_dist=prop.take("lambda_dist", float, 1.0),
        unweighted_neighbor_sum=prop.take("unweighted_neighbor_sum", bool, False),
        average_heads_hidden=prop.take("average_heads_hidden", bool, False),
        kinds=tuple(kinds),
    )
    prop.finish()

    sel = top.take_section("selection")
    exclude_seeds = sel.take("exclude_seeds", bool, True)
    sel.finish()

    gen = top.take_section("generative")
    generative = GenerativeSettings(
        init_acc=gen.take("init_acc", float, 0.9),
        acc_prior=gen.take("acc_prior", float, 5.0),
        balance_prior=gen.take("balance_prior", float, 100.0),
        em_epochs=gen.take("em_epochs", int, 5),
    )
    gen.finish()

    crf_sec = top.take_section("crf")
    crf = CrfSettings(
        enabled=crf_sec.take("enabled", bool, True),
        learning_rate=crf_sec.take("learning_rate", float, 0.1),
        l2=crf_sec.take("l2", float, 1e-3),
        epochs=crf_sec.take("epochs", int, 30),
        soft_labels=crf_sec.take("soft_labels", bool, False),
    )
    crf_sec.finish()

    cfg = PipelineConfig(
        train_corpus=_resolve(train, base_dir),
        seed_rules=_resolve(seed_rules, base_dir),
        dev_corpus=_resolve(dev, base_dir),
        test_corpus=_resolve(test, base_dir),
        link_votes=tuple(_resolve(p, base_dir) for p in links_raw),
        corpus_format=top.take("corpus_format", str, "jsonl"),
        output_dir=_resolve(top.take("output_dir", str, "out"), base_dir),
        seed=top.take("seed", int, 0),
        report_mode=top.take("report_mode", str, "exact"),
        graph_k=graph_k,
        embeddings=embeddings,
        extraction=extraction,
        propagation=propagation,
        selection_exclude_seeds=exclude_seeds,
        generative=generative,
        crf=crf,
    )
    top.finish()
    return cfg


def load_config(path: str, output_dir: Optional[str] = None,
                seed: Optional[int] = None) -> PipelineConfig:
    """Parse a JSON config file; relative paths resolve against its directory.

    output_dir and seed, when given, override the file (CLI flags).
    """
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc.msg}, line {exc.lineno})") from None
    if not isinstance(data, dict):
        raise DataError(f"{path}: config must be a JSON object")
    if output_dir is not None:
        data["output_dir"] = os.path.abspath(output_dir)
    if seed is not None:
        data["seed"] = seed
    return parse_config(data, base_dir=os.path.dirname(os.path.abspath(path)))


def config_with_kinds(cfg: PipelineConfig, enabled: Sequence[str],
                      subdir: str) -> PipelineConfig:
    """Copy of cfg with exactly `enabled` kinds on, writing under a subdirectory."""
    data = cfg.to_dict()
    kinds = data["propagation"]["kinds"]
    for name in enabled:
        if name not in kinds:
            raise DataError(f"kind {name!r} is not configured")
    for name, entry in kinds.items():
        entry["enabled"] = name in enabled
    data["output_dir"] = os.path.join(cfg.output_dir, subdir)
    return parse_config(data, base_dir=".")


# ---------------------------------------------------------------------------
# Artifacts


def _p(cfg: PipelineConfig, name: str) -> str:
    return os.path.join(cfg.output_dir, name)


def _require(cfg: PipelineConfig, name: str, producer: str) -> str:
    path = _p(cfg, name)
    if not os.path.exists(path):
        raise DataError(f"missing artifact {name}; run stage {producer!r} first")
    return path


def _write_meta(cfg: PipelineConfig, name: str, stage: str) -> None:
    record = {"stage": stage, "config_sha256": cfg.config_hash(), "seed": cfg.seed}
    with open(_p(cfg, name) + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump(record, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def derive_seed(base: int, *parts: str) -> int:
    """Stable per-purpose sub-seed; independent of call order."""
    key = base.to_bytes(8, "little", signed=True)
    digest = hashlib.blake2b("/".join(parts).encode("utf-8"),
                             digest_size=8, key=key).digest()
    return int.from_bytes(digest[:4], "little")


def _thread_count() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise DataError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise DataError(f"{THREADS_ENV} must be >= 1, got {n}")
    return n


def _load_split(cfg: PipelineConfig, path: str) -> Corpus:
    return load_corpus(path, cfg.corpus_format)


def _seed_labels(seeds: RuleSet) -> list[str]:
    labels = sorted({r.label for r in seeds})
    for label in labels:
        if any(c in label for c in "/\\\t\n "):
            raise DataError(f"label {label!r} is not filename-safe")
    return labels


def _runs(cfg: PipelineConfig, labels: Sequence[str]) -> list[tuple[str, str]]:
    return [(label, kind) for label in labels
            for kind in cfg.propagation.enabled_kinds()]


# ---------------------------------------------------------------------------
# Stages


def stage_extract(cfg: PipelineConfig) -> None:
    os.makedirs(cfg.output_dir, exist_ok=True)
    train = _load_split(cfg, cfg.train_corpus)
    seeds = load_seed_rules(cfg.seed_rules)
    labels = _seed_labels(seeds)

    if cfg.dev_corpus is not None:
        dev = _load_split(cfg, cfg.dev_corpus)
        patterns = mine_pos_patterns(dev, cfg.extraction.mined_patterns)
    else:
        dev = None
        patterns = [PosPattern.parse(FIXED_PATTERN)]
    with open(_p(cfg, "patterns.txt"), "w", encoding="utf-8") as fh:
        for p in patterns:
            fh.write(str(p) + "\n")
    _write_meta(cfg, "patterns.txt", "extract")

    train_mentions = extract_candidates(train, patterns)
    splits = [("train", train_mentions)]
    if dev is not None:
        splits.append(("dev", extract_candidates(dev, patterns)))
    if cfg.test_corpus is not None:
        test = _load_split(cfg, cfg.test_corpus)
        splits.append(("test", extract_candidates(test, patterns)))
    for split_name, mentions in splits:
        name = f"mentions_{split_name}.tsv"
        save_mentions(mentions, _p(cfg, name))
        _write_meta(cfg, name, "extract")

    rcfg = cfg.extraction.rule_config()
    for label in labels:
        candidates = extract_candidate_rules(train, train_mentions, rcfg, label)
        name = f"candidates_{label}.tsv"
        save_rules(candidates, _p(cfg, name))
        _write_meta(cfg, name, "extract")
        logger.info("extracted %d candidate rules for label %s", len(candidates), label)


def _embedding_table(cfg: PipelineConfig, train: Corpus) -> tuple[EmbeddingTable, bool]:
    """Returns (table, computed_here)."""
    if cfg.embeddings.path is not None:
        return load_embedding_table(cfg.embeddings.path, train), False
    if not cfg.embeddings.fallback:
        raise DataError("no embedding source: set embeddings.path or embeddings.fallback")
    seed = cfg.embeddings.seed
    if seed is None:
        seed = derive_seed(cfg.seed, "embeddings")
    return hash_fallback_embed(train, cfg.embeddings.dim, seed), True


def stage_write_embeddings(cfg: PipelineConfig) -> None:
    os.makedirs(cfg.output_dir, exist_ok=True)
    train = _load_split(cfg, cfg.train_corpus)
    table, _ = _embedding_table(cfg, train)
    write_embedding_table(table, _p(cfg, "embeddings.glre"))
    _write_meta(cfg, "embeddings.glre", "write-embeddings")


def stage_graph(cfg: PipelineConfig) -> None:
    seeds = load_seed_rules(cfg.seed_rules)
    labels = _seed_labels(seeds)
    runs = _runs(cfg, labels)
    if not runs:
        logger.info("no rule kinds enabled; graph stage has nothing to build")
        return
    train = _load_split(cfg, cfg.train_corpus)
    mentions = load_mentions(_require(cfg, "mentions_train.tsv", "extract"), train)
    table, computed = _embedding_table(cfg, train)
    if computed:
        write_embedding_table(table, _p(cfg, "embeddings.glre"))
        _write_meta(cfg, "embeddings.glre", "graph")

    for label, kind in runs:
        cand_path = _require(cfg, f"candidates_{label}.tsv", "extract")
        candidates = [r for r in load_seed_rules(cand_path) if r.kind.value == kind]
        kind_seeds = [s for s in seeds
                      if s.label == label and s.kind.value == kind]
        nodes = RuleSet()
        for rule, matched in zip(candidates, match_many(candidates, train, mentions)):
            nodes.add(rule, matched)
        kept_seeds = RuleSet()
        for rule, matched in zip(kind_seeds, match_many(kind_seeds, train, mentions)):
            if not matched:
                logger.warning("seed (%s, %s) matches nothing in train; "
                               "left out of the %s graph", kind, rule.key, label)
                continue
            kept_seeds.add(rule, matched)
            if rule not in nodes:
                nodes.add(rule, matched)
        has_pos = any(s.polarity == Polarity.POSITIVE for s in kept_seeds)
        has_neg = any(s.polarity == Polarity.NEGATIVE for s in kept_seeds)
        if not has_pos or not has_neg:
            raise DataError(f"kind {kind!r} for label {label!r} needs at least one "
                            "positive and one negative seed with train matches")
        embeddings = rule_embeddings(nodes, table)
        n_nodes = len({(r.kind, r.key) for r in nodes})
        if n_nodes < 2:
            raise DataError(f"graph for ({label}, {kind}) needs at least 2 nodes, "
                            f"got {n_nodes}")
        k_eff = min(cfg.graph_k, n_nodes - 1)
        if k_eff < cfg.graph_k:
            logger.warning("reducing k from %d to %d for (%s, %s): only %d nodes",
                           cfg.graph_k, k_eff, label, kind, n_nodes)
        graph = build_rule_graph(nodes, embeddings, kept_seeds, k_eff)
        name = f"graph_{label}_{kind}.json"
        save_graph(graph, _p(cfg, name))
        _write_meta(cfg, name, "graph")
        logger.info("graph (%s, %s): %d nodes, k=%d", label, kind, n_nodes, k_eff)


def stage_propagate(cfg: PipelineConfig) -> None:
    seeds = load_seed_rules(cfg.seed_rules)
    runs = _runs(cfg, _seed_labels(seeds))
    if not runs:
        logger.info("no rule kinds enabled; nothing to propagate")
        return
    gat_cfg = cfg.propagation.gat_config()

    def run_one(label: str, kind: str) -> None:
        graph = load_graph(_require(cfg, f"graph_{label}_{kind}.json", "graph"))
        ks = cfg.propagation.kind_settings(kind)
        model = PropagationModel.init(graph.embeddings.shape[1], gat_cfg,
                                      derive_seed(cfg.seed, "gat-init", label, kind))
        trained, log = train_propagation(model, graph, ks.epochs,
                                         derive_seed(cfg.seed, "gat-train", label, kind))
        name = f"model_{label}_{kind}.glpm"
        save_propagation_model(trained, _p(cfg, name))
        _write_meta(cfg, name, "propagate")
        log_name = f"trainlog_{label}_{kind}.csv"
        with open(_p(cfg, log_name), "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "l_sup", "l_reg", "l_dist", "l_total"])
            for epoch, entry in enumerate(log):
                writer.writerow([epoch, f"{entry.l_sup:.10g}", f"{entry.l_reg:.10g}",
                                 f"{entry.l_dist:.10g}", f"{entry.l_total:.10g}"])
        _write_meta(cfg, log_name, "propagate")

    threads = min(_thread_count(), len(runs))
    if threads <= 1:
        for label, kind in runs:
            run_one(label, kind)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(run_one, label, kind) for label, kind in runs]
            for f in futures:
                f.result()


def stage_select(cfg: PipelineConfig) -> None:
    seeds = load_seed_rules(cfg.seed_rules)
    runs = _runs(cfg, _seed_labels(seeds))
    augmented = RuleSet()
    for s in seeds:
        augmented.add(s)
    for label, kind in runs:
        graph = load_graph(_require(cfg, f"graph_{label}_{kind}.json", "graph"))
        model = load_propagation_model(
            _require(cfg, f"model_{label}_{kind}.glpm", "propagate"))
        ks = cfg.propagation.kind_settings(kind)
        selected = select_new_rules(model, graph, SelectionConfig(
            m=ks.num_new_rules, exclude_seeds=cfg.selection_exclude_seeds))
        name = f"selected_{label}_{kind}.tsv"
        save_rules(selected, _p(cfg, name))
        _write_meta(cfg, name, "select")
        added = 0
        for rule in selected:
            if rule not in augmented:
                augmented.add(rule)
                added += 1
        logger.info("selected %d rules for (%s, %s); %d new", len(selected),
                    label, kind, added)
    roster = sorted(augmented, key=lambda r: (r.kind.value, r.key, r.label,
                                              r.polarity.value))
    save_rules(roster, _p(cfg, "augmented_rules.tsv"))
    _write_meta(cfg, "augmented_rules.tsv", "select")


def stage_apply(cfg: PipelineConfig) -> None:
    roster = load_seed_rules(_require(cfg, "augmented_rules.tsv", "select"))
    train = _load_split(cfg, cfg.train_corpus)
    mentions = load_mentions(_require(cfg, "mentions_train.tsv", "extract"), train)
    matrix = apply_rules(roster, train, mentions)
    save_label_matrix(matrix, _p(cfg, "label_matrix_train.tsv"))
    _write_meta(cfg, "label_matrix_train.tsv", "apply")
    logger.info("train matrix: %d votes", matrix.vote_count())
    if cfg.test_corpus is not None:
        test = _load_split(cfg, cfg.test_corpus)
        test_mentions = load_mentions(_require(cfg, "mentions_test.tsv", "extract"), test)
        test_matrix = apply_rules(roster, test, test_mentions)
        save_label_matrix(test_matrix, _p(cfg, "label_matrix_test.tsv"))
        _write_meta(cfg, "label_matrix_test.tsv", "apply")


def _load_links(cfg: PipelineConfig, corpus: Corpus) -> list[LinkVoteTable]:
    return [load_link_votes(path, corpus) for path in cfg.link_votes]


def stage_fit_label_model(cfg: PipelineConfig) -> None:
    roster = load_seed_rules(_require(cfg, "augmented_rules.tsv", "select"))
    train = _load_split(cfg, cfg.train_corpus)
    matrix = load_label_matrix(_require(cfg, "label_matrix_train.tsv", "apply"),
                               train, roster.rules)
    links = _load_links(cfg, train)
    tags = TagSet.from_labels({r.label for r in roster})
    model = init_generative(matrix, tags, cfg.generative.init_acc,
                            cfg.generative.acc_prior, cfg.generative.balance_prior)
    model, trace = fit_em(model, matrix, links, cfg.generative.em_epochs)
    save_generative_model(model, _p(cfg, "generative.glgm"))
    _write_meta(cfg, "generative.glgm", "fit-label-model")
    with open(_p(cfg, "em_trace.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "log_posterior"])
        for epoch, value in enumerate(trace):
            writer.writerow([epoch, f"{value:.10g}"])
    _write_meta(cfg, "em_trace.csv", "fit-label-model")
    marginals = posterior_marginals(model, matrix, links)
    save_marginals(marginals, _p(cfg, "marginals_train.tsv"))
    _write_meta(cfg, "marginals_train.tsv", "fit-label-model")


def _break_boundaries(links: Sequence[LinkVoteTable]) -> dict[tuple[int, int], set[int]]:
    out: dict[tuple[int, int], set[int]] = {}
    for table in links:
        for (doc, sent, right), vote in table.votes.items():
            if vote == BREAK:
                out.setdefault((doc, sent), set()).add(right)
    return out


def weak_bio_tags(model, matrix: LabelMatrix,
                  links: Sequence[LinkVoteTable]) -> list[tuple[int, int, list[str]]]:
    """Viterbi-decode the label model and convert runs to BIO, honoring breaks."""
    breaks = _break_boundaries(links)
    out = []
    for doc, sent, tag_names in viterbi_decode(model, matrix, links):
        spans = decode_spans(tag_names, breaks.get((doc, sent), set()))
        out.append((doc, sent, spans_to_bio(len(tag_names), spans)))
    return out


def stage_train_tagger(cfg: PipelineConfig) -> None:
    roster = load_seed_rules(_require(cfg, "augmented_rules.tsv", "select"))
    train = _load_split(cfg, cfg.train_corpus)
    matrix = load_label_matrix(_require(cfg, "label_matrix_train.tsv", "apply"),
                               train, roster.rules)
    model = load_generative_model(_require(cfg, "generative.glgm", "fit-label-model"))
    links = _load_links(cfg, train)
    trace: list[float] = []
    if cfg.crf.soft_labels:
        marginals = posterior_marginals(model, matrix, links)
        examples = []
        for doc_i, sent_i, sentence in train.sentences():
            base = train.sentence_offset(doc_i, sent_i)
            examples.append((sentence, marginals.probs[base:base + len(sentence.tokens)]))
        classes: Optional[Sequence[str]] = model.tags.tags
    else:
        by_sent = {(doc, sent): bio for doc, sent, bio in weak_bio_tags(model, matrix, links)}
        examples = [(sentence, by_sent[(doc_i, sent_i)])
                    for doc_i, sent_i, sentence in train.sentences()]
        classes = None
    tagger = train_crf(examples, classes=classes, l2=cfg.crf.l2,
                       epochs=cfg.crf.epochs, lr=cfg.crf.learning_rate,
                       trace=trace)
    save_crf_model(tagger, _p(cfg, "tagger.glcm"))
    _write_meta(cfg, "tagger.glcm", "train-tagger")
    with open(_p(cfg, "crf_trace.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "objective"])
        for epoch, value in enumerate(trace):
            writer.writerow([epoch, f"{value:.10g}"])
    _write_meta(cfg, "crf_trace.csv", "train-tagger")


def _gold_spans(corpus: Corpus, what: str) -> list[tuple]:
    gold = []
    any_present = False
    for _, _, sentence in corpus.sentences():
        if sentence.gold_spans is not None:
            any_present = True
        gold.append(sentence.gold_spans or ())
    if not any_present:
        raise DataError(f"{what} has no gold spans; cannot evaluate")
    return gold


def generative_test_score(cfg: PipelineConfig) -> SpanScore:
    """Span F1 of the label model's Viterbi decode on the test corpus."""
    if cfg.test_corpus is None:
        raise DataError("config has no test_corpus")
    roster = load_seed_rules(_require(cfg, "augmented_rules.tsv", "select"))
    test = _load_split(cfg, cfg.test_corpus)
    matrix = load_label_matrix(_require(cfg, "label_matrix_test.tsv", "apply"),
                               test, roster.rules)
    model = load_generative_model(_require(cfg, "generative.glgm", "fit-label-model"))
    decoded = viterbi_decode(model, matrix, [])
    pred = [decode_spans(tag_names) for _, _, tag_names in decoded]
    return span_f1_from_spans(pred, _gold_spans(test, "test corpus"))


def stage_eval(cfg: PipelineConfig) -> None:
    if cfg.test_corpus is None:
        raise DataError("eval stage needs test_corpus in the config")
    roster = load_seed_rules(_require(cfg, "augmented_rules.tsv", "select"))
    test = _load_split(cfg, cfg.test_corpus)
    matrix = load_label_matrix(_require(cfg, "label_matrix_test.tsv", "apply"),
                               test, roster.rules)
    model = load_generative_model(_require(cfg, "generative.glgm", "fit-label-model"))
    gold = _gold_spans(test, "test corpus")
    decoded = viterbi_decode(model, matrix, [])
    gen_bio = {(doc, sent): spans_to_bio(len(tags), decode_spans(tags))
               for doc, sent, tags in decoded}
    gen_spans = [decode_spans(tags) for _, _, tags in decoded]
    rows = [("generative", span_f1_from_spans(gen_spans, gold))]

    tagger_path = _p(cfg, "tagger.glcm")
    crf_bio: Optional[dict] = None
    if os.path.exists(tagger_path):
        tagger = load_crf_model(tagger_path)
        crf_bio = {}
        pred_spans = []
        for doc_i, sent_i, sentence in test.sentences():
            tags = predict_crf(tagger, sentence)
            crf_bio[(doc_i, sent_i)] = tags
            pred_spans.append(bio_to_spans(tags))
        rows.append(("crf", span_f1_from_spans(pred_spans, gold)))

    with open(_p(cfg, "scores.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "precision", "recall", "f1", "tp", "fp", "fn"])
        for name, score in rows:
            writer.writerow([name, f"{score.precision:.6f}", f"{score.recall:.6f}",
                             f"{score.f1:.6f}", score.tp, score.fp, score.fn])
    _write_meta(cfg, "scores.csv", "eval")
    for name, score in rows:
        logger.info("%s: P=%.4f R=%.4f F1=%.4f", name, score.precision,
                    score.recall, score.f1)

    pred_map = crf_bio if crf_bio is not None else gen_bio
    with open(_p(cfg, "predictions_test.conll"), "w", encoding="utf-8") as fh:
        first = True
        for i, (doc_i, sent_i, sentence) in enumerate(test.sentences()):
            if not first:
                fh.write("\n")
            first = False
            gold_bio = spans_to_bio(len(sentence.tokens), gold[i])
            pred_bio = pred_map[(doc_i, sent_i)]
            for tok, g, p in zip(sentence.tokens, gold_bio, pred_bio):
                fh.write(f"{tok.text}\t{g}\t{p}\n")
    _write_meta(cfg, "predictions_test.conll", "eval")

    if cfg.dev_corpus is not None:
        dev = _load_split(cfg, cfg.dev_corpus)
        dev_mentions = load_mentions(_require(cfg, "mentions_dev.tsv", "extract"), dev)
        report = rule_accuracy_report(roster, dev, dev_mentions, cfg.report_mode)
        save_rule_report(report, _p(cfg, "rule_report.tsv"))
        _write_meta(cfg, "rule_report.tsv", "eval")


_STAGE_FUNCS = {
    "extract": stage_extract,
    "graph": stage_graph,
    "propagate": stage_propagate,
    "select": stage_select,
    "apply": stage_apply,
    "fit-label-model": stage_fit_label_model,
    "train-tagger": stage_train_tagger,
    "eval": stage_eval,
    "write-embeddings": stage_write_embeddings,
}


def run_pipeline(cfg: PipelineConfig, stage: str) -> None:
    """Run one stage, or every stage in order for 'all'."""
    if stage == "all":
        for name in ("extract", "graph", "propagate", "select", "apply",
                     "fit-label-model"):
            _STAGE_FUNCS[name](cfg)
        if cfg.crf.enabled:
            stage_train_tagger(cfg)
        if cfg.test_corpus is not None:
            stage_eval(cfg)
        else:
            logger.info("no test_corpus configured; skipping eval")
        return
    if stage not in _STAGE_FUNCS:
        raise DataError(f"unknown stage {stage!r} (expected one of {', '.join(STAGES)})")
    _STAGE_FUNCS[stage](cfg)
