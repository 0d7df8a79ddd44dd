"""Dense float64 tensors with reverse-mode autodiff, plus first-order optimizers."""

from recupfl.numerics import autodiff
from recupfl.numerics.autodiff import Graph, Tensor, backward, forward, grad, nested_grad, tensor
from recupfl.numerics.optim import AdamState, adam_init, adam_step, sgd_step

__all__ = [
    "autodiff",
    "Graph",
    "Tensor",
    "backward",
    "forward",
    "grad",
    "nested_grad",
    "tensor",
    "AdamState",
    "adam_init",
    "adam_step",
    "sgd_step",
]
