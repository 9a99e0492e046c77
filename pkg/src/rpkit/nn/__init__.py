"""Minimal differentiable substrate: tensors, layers, AdamW, gradient checks, checkpoints."""
from rpkit.nn.checkpoint import (
    CheckpointError, ModelNotTrained, load_checkpoint, read_config, save_checkpoint, save_module,
)
from rpkit.nn.gradcheck import grad_check
from rpkit.nn.layers import (
    MLP, Embedding, LayerNorm, Linear, Module, MultiHeadAttention, TransformerBlock,
    causal_mask, key_padding_mask,
)
from rpkit.nn.optim import AdamW, DivergenceDetected, OptimizerConfig, ensure_finite, optimizer_step
from rpkit.nn.tensor import NonFinite, ShapeMismatch, Tensor, no_grad, set_checked
