from .autograd import Tensor
from .layers import NonFiniteLoss, ShapeMismatch, adam_init, adam_update, value_and_grad

__all__ = ["Tensor", "NonFiniteLoss", "ShapeMismatch", "adam_init", "adam_update", "value_and_grad"]
