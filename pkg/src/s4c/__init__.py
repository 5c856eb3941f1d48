"""Speculative decoding with a multi-head autoregressive draft and a continuous verification tree."""

from .draft import DraftConfig, S4CDraft, TabularDraft, load_draft, run_draft_round, save_draft
from .errors import S4CError
from .models import ForwardResult, KVCache, ModelSpec, TabularModel, TransformerModel
from .rng import Rng
from .stats import GenStats
from .tree import DraftTree, TreeNode, build_mask, flatten, longest_accepted_path
from .verify import (
    VerifyOutcome,
    accept_token,
    autoregressive_generate,
    exact_output_distribution,
    generate,
    residual_distribution,
    verify_round,
)

__version__ = "0.1.0"

__all__ = [
    "DraftConfig", "DraftTree", "ForwardResult", "GenStats", "KVCache", "ModelSpec", "Rng",
    "S4CDraft", "S4CError", "TabularDraft", "TabularModel", "TransformerModel", "TreeNode",
    "VerifyOutcome", "accept_token", "autoregressive_generate", "build_mask",
    "exact_output_distribution", "flatten", "generate", "load_draft", "longest_accepted_path",
    "residual_distribution", "run_draft_round", "save_draft", "verify_round",
]
