"""Entity set expansion over a closed vocabulary.

Given a few seed entities, the engine generates candidate entities by
prefix-constrained beam search over the vocabulary trie, samples them
into balanced fixed-size lists, has a pluggable ranker order each list,
aggregates the per-list positions into one global ordering, and scores
the outcome with MAP@K / P@K.
"""

__version__ = "0.1.0"

from .aggregator import ExpansionResult, Provenance, ScoreTable, finalize
from .corpus import (
    Entity,
    Query,
    Vocabulary,
    load_queries,
    load_vocabulary,
    save_vocabulary,
    tokenize,
)
from .decoder import (
    CandidateSet,
    HeuristicScorer,
    ScoredEntity,
    TokenScorer,
    UniformScorer,
    decode,
    exhaustive_decode,
)
from .metrics import (
    average_precision_at_k,
    evaluate,
    kendall_tau,
    precision_at_k,
)
from .pipeline import RunConfig, RunManifest, run_ablation, run_expand
from .ranker import (
    RankedList,
    RankerConfig,
    RankOutcome,
    TranscriptStore,
    make_ranker,
    parse_response,
    render_prompt,
)
from .sampler import SampleList, SamplePlan, build_plan, pad_policy
from .trie import PrefixTrie

__all__ = [
    "CandidateSet",
    "Entity",
    "ExpansionResult",
    "HeuristicScorer",
    "PrefixTrie",
    "Provenance",
    "Query",
    "RankOutcome",
    "RankedList",
    "RankerConfig",
    "RunConfig",
    "RunManifest",
    "SampleList",
    "SamplePlan",
    "ScoreTable",
    "ScoredEntity",
    "TokenScorer",
    "TranscriptStore",
    "UniformScorer",
    "Vocabulary",
    "average_precision_at_k",
    "build_plan",
    "decode",
    "evaluate",
    "exhaustive_decode",
    "finalize",
    "kendall_tau",
    "load_queries",
    "load_vocabulary",
    "make_ranker",
    "pad_policy",
    "parse_response",
    "precision_at_k",
    "render_prompt",
    "run_ablation",
    "run_expand",
    "save_vocabulary",
    "tokenize",
]
