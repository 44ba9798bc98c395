from .tensor import Tensor, as_tensor
from .params import (
    ParameterStore,
    TrainingNumericsError,
    adam_update,
    clip_grads,
    global_grad_norm,
    load_checkpoint,
    save_checkpoint,
)
from . import ops

__all__ = [
    "Tensor",
    "as_tensor",
    "ParameterStore",
    "TrainingNumericsError",
    "adam_update",
    "clip_grads",
    "global_grad_norm",
    "load_checkpoint",
    "save_checkpoint",
    "ops",
]
