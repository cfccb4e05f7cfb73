"""Weak supervision for sequence tagging built around labeling rules.

Seed rules grow into a larger roster by label propagation over a rule
similarity graph (a small graph attention network trained on seed
polarity), the roster votes on tokens, a linked hidden Markov model
turns the votes into tags, and an optional CRF generalizes beyond the
rules' coverage.
"""
from .corpus import (CandidateMention, Corpus, PosPattern, Sentence, Token,
                     bio_to_spans, extract_candidates, load_corpus,
                     mine_pos_patterns, spans_to_bio)
from .embed import EmbeddingTable, hash_fallback_embed, rule_embeddings
from .errors import DataError, NumericError
from .evaluation import SpanScore, rule_accuracy_report, run_ablation, span_f1
from .generative import (GenerativeModel, TagSet, fit_em, init_generative,
                         posterior_marginals, viterbi_decode)
from .discriminative import CrfModel, predict_crf, train_crf
from .labeling import LabelMatrix, LinkVoteTable, apply_rules
from .pipeline import PipelineConfig, load_config, parse_config, run_pipeline
from .propagation import (GatConfig, PropagationModel, RuleGraph,
                          SelectionConfig, build_rule_graph, gat_forward,
                          select_new_rules, train_propagation)
from .rules import (Polarity, Rule, RuleExtractionConfig, RuleKind, RuleSet,
                    extract_candidate_rules, load_seed_rules, match_rule)

__version__ = "0.1.0"

__all__ = [
    "CandidateMention", "Corpus", "CrfModel", "DataError", "EmbeddingTable",
    "GatConfig", "GenerativeModel", "LabelMatrix", "LinkVoteTable",
    "NumericError", "PipelineConfig", "Polarity", "PosPattern",
    "PropagationModel", "Rule", "RuleExtractionConfig", "RuleGraph",
    "RuleKind", "RuleSet", "SelectionConfig", "Sentence", "SpanScore",
    "TagSet", "Token", "apply_rules", "bio_to_spans", "build_rule_graph",
    "extract_candidate_rules", "extract_candidates", "fit_em", "gat_forward",
    "hash_fallback_embed", "init_generative", "load_config", "load_corpus",
    "load_seed_rules", "match_rule", "mine_pos_patterns", "parse_config",
    "posterior_marginals", "predict_crf", "rule_accuracy_report",
    "rule_embeddings", "run_ablation", "run_pipeline", "select_new_rules",
    "span_f1", "spans_to_bio", "train_crf", "train_propagation",
    "viterbi_decode", "__version__",
]
