from . import tensor as ops
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import grad_check, grad_check_params
from .nn import MLP, LayerNorm, Linear, ParamSet
from .optim import SGD, AdamW, clip_grad_norm
from .tensor import DiffValue, NonFiniteError, ShapeError

__all__ = [
    "AdamW", "DiffValue", "LayerNorm", "Linear", "MLP", "NonFiniteError", "ParamSet",
    "SGD", "ShapeError", "clip_grad_norm", "grad_check", "grad_check_params",
    "load_checkpoint", "ops", "save_checkpoint",
]
