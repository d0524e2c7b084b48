"""Local-global spatio-temporal attention for clip classification."""

from ._logoformer import (  # noqa: F401
    LogoError,
    Model,
    ModelConfig,
    PoolMode,
    SyntheticSpec,
    TrainConfig,
    WindowSpec,
    compact_term,
    cost_report,
    cost_sweep,
    cross_entropy,
    embeddings_csv,
    evaluate,
    evaluate_model,
    generate,
    gradcheck,
    non_target_distribution,
    tiny_config,
    total_loss,
    train,
)

__all__ = [name for name in dir() if not name.startswith("_")]
