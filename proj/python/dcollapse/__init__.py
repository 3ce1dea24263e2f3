"""Dimensional-collapse laboratory for embedding distillation."""

from ._core import (
    Error,
    FormatError,
    InvalidInput,
    analyze,
    centered_effective_rank,
    checkpoint_config,
    cosine_distill,
    desk_train_config,
    effective_rank,
    embed,
    embedding_rank,
    gen_synthetic,
    gen_teacher,
    infonce,
    knn_accuracy,
    mean_pairwise_cosine,
    normalize_rows,
    read_emb1,
    read_records,
    singular_values,
    train,
    write_emb1,
    write_records,
)

__all__ = [
    "Error",
    "FormatError",
    "InvalidInput",
    "analyze",
    "centered_effective_rank",
    "checkpoint_config",
    "cosine_distill",
    "desk_train_config",
    "effective_rank",
    "embed",
    "embedding_rank",
    "gen_synthetic",
    "gen_teacher",
    "infonce",
    "knn_accuracy",
    "mean_pairwise_cosine",
    "normalize_rows",
    "read_emb1",
    "read_records",
    "singular_values",
    "train",
    "write_emb1",
    "write_records",
]
