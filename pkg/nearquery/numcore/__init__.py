"""
Dense tensors, differentiable kernels, Adam and gradient checking
"""
from nearquery.numcore.tensor import Tensor, no_grad, tensor
from nearquery.numcore.optim import AdamState, adam_step
from nearquery.numcore.gradcheck import GradcheckReport, backward_and_gradcheck

__all__ = [
    "Tensor",
    "tensor",
    "no_grad",
    "AdamState",
    "adam_step",
    "GradcheckReport",
    "backward_and_gradcheck",
]
