"""
Adam optimiser over numcore tensors
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from nearquery.exceptions import ShapeError
from nearquery.numcore.tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """Moment accumulators (one per parameter, same shapes) and hyper-parameters"""
    first_moment: List[np.ndarray]
    second_moment: List[np.ndarray]
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(
        cls,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> "AdamState":
        if lr <= 0:
            raise ValueError(f"lr must be > 0, got {lr}")
        return cls(
            first_moment=[np.zeros_like(p.data) for p in params],
            second_moment=[np.zeros_like(p.data) for p in params],
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )

    def hyperparameters(self) -> Dict[str, float]:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step_count": self.step_count,
        }


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    state: AdamState,
) -> AdamState:
    """Apply one bias-corrected Adam update.

    Parameter values are replaced (never written in place). A parameter whose
    gradient is missing or identically zero keeps its value and moments;
    ``step_count`` advances regardless.

    Args:
        params: Tensors to update
        grads: Gradient per parameter (None counts as zero)
        state: Accumulators; updated in place and returned

    Returns:
        The updated state
    """
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError(
            f"adam_step: {len(params)} params, {len(grads)} grads, "
            f"{len(state.first_moment)} accumulators"
        )
    if state.lr <= 0:
        raise ValueError(f"adam_step: lr must be > 0, got {state.lr}")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t

    for i, (param, grad) in enumerate(zip(params, grads)):
        m, v = state.first_moment[i], state.second_moment[i]
        if m.shape != param.shape or v.shape != param.shape:
            raise ShapeError(
                f"adam_step: accumulator {m.shape} does not match parameter "
                f"{param.name or i} {param.shape}"
            )
        if grad is None:
            continue
        if grad.shape != param.shape:
            raise ShapeError(
                f"adam_step: gradient {grad.shape} does not match parameter "
                f"{param.name or i} {param.shape}"
            )
        if not grad.any():
            continue
        grad = grad.astype(param.dtype, copy=False)
        m = b1 * m + (1.0 - b1) * grad
        v = b2 * v + (1.0 - b2) * grad * grad
        state.first_moment[i] = m.astype(param.dtype, copy=False)
        state.second_moment[i] = v.astype(param.dtype, copy=False)
        m_hat = m / correction1
        v_hat = v / correction2
        update = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        param.data = (param.data - update).astype(param.dtype, copy=False)

    return state


__all__ = ["AdamState", "adam_step"]
