"""Tensors, reverse-mode AD, AdamW, seeded streams and checkpoints."""
from . import ops
from .checkpoint import CheckpointError, load_checkpoint, read_header, save_checkpoint
from .gradcheck import analytic_grad, grad_check, numeric_grad, relative_errors
from .ops import (
    binary_cross_entropy, cross_entropy, embedding_lookup, gelu, layer_norm, matmul,
    softmax,
)
from .optim import OptimizerState, adamw_step
from .rng import RngStream, rng
from .tensor import (
    ContractError, ShapeError, Tape, Tensor, as_tensor, backward, current_tape, get_dtype,
    no_grad, precision, set_dtype, use_tape,
)

__all__ = [
    "ops", "Tensor", "Tape", "backward", "no_grad", "use_tape", "current_tape", "precision",
    "get_dtype", "set_dtype", "as_tensor", "ShapeError", "ContractError", "matmul", "softmax",
    "layer_norm", "embedding_lookup", "cross_entropy", "binary_cross_entropy", "gelu",
    "grad_check", "numeric_grad", "analytic_grad", "relative_errors", "OptimizerState",
    "adamw_step", "RngStream", "rng", "save_checkpoint", "load_checkpoint", "read_header",
    "CheckpointError",
]
