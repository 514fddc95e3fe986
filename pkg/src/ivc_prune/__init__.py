"""RoPE coordinate scoring and value-similarity visual token pruning."""

from ivc_prune.layout import GridLayout
from ivc_prune.prune_engine import KvCacheStats, PruneConfig, run_with_pruning
from ivc_prune.rope_core import RopeConfig, ScoreTable, score_table
from ivc_prune.selection import SelectionConfig, SelectionResult, select_tokens
from ivc_prune.toy_model import ModelConfig, TokenSequence, decode_step, forward_full, init_model, make_sequence

__version__ = "0.1.0"

__all__ = [
    "GridLayout",
    "KvCacheStats",
    "ModelConfig",
    "PruneConfig",
    "RopeConfig",
    "ScoreTable",
    "SelectionConfig",
    "SelectionResult",
    "TokenSequence",
    "decode_step",
    "forward_full",
    "init_model",
    "make_sequence",
    "run_with_pruning",
    "score_table",
    "select_tokens",
]
