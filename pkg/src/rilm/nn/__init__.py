from rilm.nn.checkpoint import (
    Checkpoint,
    CheckpointError,
    average_checkpoints,
    load_checkpoint,
    save_checkpoint,
)
from rilm.nn.layers import (
    CrossAttentionLayer,
    Embedding,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    MultiHeadAttention,
    SelfAttentionLayer,
    causal_mask,
    cross_entropy,
    length_mask,
    sinusoidal_positions,
)
from rilm.nn.optim import Adam, AdamState

__all__ = [
    "Adam",
    "AdamState",
    "Checkpoint",
    "CheckpointError",
    "CrossAttentionLayer",
    "Embedding",
    "FeedForward",
    "LayerNorm",
    "Linear",
    "Module",
    "ModuleList",
    "MultiHeadAttention",
    "SelfAttentionLayer",
    "average_checkpoints",
    "causal_mask",
    "cross_entropy",
    "length_mask",
    "load_checkpoint",
    "save_checkpoint",
    "sinusoidal_positions",
]
