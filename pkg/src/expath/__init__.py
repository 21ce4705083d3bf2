"""Rule-based explanations for knowledge graph embedding link predictions."""

from .kg import Fact, KnowledgeGraph, SignedRelation, build_graph, load_dataset, write_dataset
from .kge import EmbeddingModel, ModelConfig, load_checkpoint, save_checkpoint, train
from .rules import MinedRuleSet, Rule, Thresholds, mine, parse_rule
from .scorer import Explanation, ScoredFact, select_explanation

__version__ = "0.1.0"

__all__ = [
    "EmbeddingModel",
    "Explanation",
    "Fact",
    "KnowledgeGraph",
    "MinedRuleSet",
    "ModelConfig",
    "Rule",
    "ScoredFact",
    "SignedRelation",
    "Thresholds",
    "build_graph",
    "load_checkpoint",
    "load_dataset",
    "mine",
    "parse_rule",
    "save_checkpoint",
    "select_explanation",
    "train",
    "write_dataset",
]
