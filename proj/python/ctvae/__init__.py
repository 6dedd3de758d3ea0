"""Variational conversation-response generators with TCD reranking."""

try:
    from ctvae._core import (
        AnnealSchedule,
        GeneratorModel,
        LmModel,
        ModelConfig,
        TcdConfig,
        TcdModel,
        Vocab,
        build_vocab,
        distinct_n,
        matching_pct,
        rank_score,
        rerank,
        split_pairs,
        synthesize_corpus,
        tokenize,
        unique_pct,
    )
except ImportError:
    # development tree: the extension sits on sys.path next to the build
    # directory instead of inside the package
    from _core import (
        AnnealSchedule,
        GeneratorModel,
        LmModel,
        ModelConfig,
        TcdConfig,
        TcdModel,
        Vocab,
        build_vocab,
        distinct_n,
        matching_pct,
        rank_score,
        rerank,
        split_pairs,
        synthesize_corpus,
        tokenize,
        unique_pct,
    )

__version__ = "1.0.0"

__all__ = [
    "AnnealSchedule",
    "GeneratorModel",
    "LmModel",
    "ModelConfig",
    "TcdConfig",
    "TcdModel",
    "Vocab",
    "build_vocab",
    "distinct_n",
    "matching_pct",
    "rank_score",
    "rerank",
    "split_pairs",
    "synthesize_corpus",
    "tokenize",
    "unique_pct",
]
