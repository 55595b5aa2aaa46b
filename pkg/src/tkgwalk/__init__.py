"""Path-walking reinforcement learning agent for temporal knowledge graph extrapolation."""

from .env import Environment, SemanticMode
from .errors import (BoundsError, CheckpointError, ConfigError, ContractViolation, EmptySplitError,
                     NonFiniteError, ParseError, TKGError)
from .evaluator import AbsentRule, MetricReport, evaluate, filtered_rank
from .kg import Action, Query, Quadruple, TemporalKG, TemporalKGBuilder, ingest, load_dataset
from .policy import PolicyConfig, PolicyNetwork, PolicyParams, Variant
from .ranker import beam_search, explain, rank
from .trainer import TrainConfig, Trainer, rollout, train

__all__ = [
    "AbsentRule", "Action", "BoundsError", "CheckpointError", "ConfigError", "ContractViolation",
    "EmptySplitError", "Environment", "MetricReport", "NonFiniteError", "ParseError", "PolicyConfig",
    "PolicyNetwork", "PolicyParams", "Quadruple", "Query", "SemanticMode", "TKGError", "TemporalKG",
    "TemporalKGBuilder", "TrainConfig", "Trainer", "Variant", "beam_search", "evaluate", "explain",
    "filtered_rank", "ingest", "load_dataset", "rank", "rollout", "train",
]
