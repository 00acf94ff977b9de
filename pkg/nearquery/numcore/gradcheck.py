"""
Finite-difference verification of reverse-mode gradients.

Each parameter's analytic gradient is compared against central differences
on a seeded subset of coordinates. The error of a tensor is normalised by the
largest gradient magnitude seen in that tensor, so tiny gradient entries do
not dominate the report.
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from nearquery.exceptions import ShapeError
from nearquery.numcore.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

# Denominator floor for the per-tensor relative error
REL_ERR_FLOOR = 1e-6


@dataclass
class ParamCheck:
    """Comparison for one parameter tensor"""
    name: str
    shape: tuple
    n_checked: int
    max_abs_err: float
    max_rel_err: float
    disconnected: bool = False


@dataclass
class GradcheckReport:
    """Outcome of one backward-and-compare run"""
    tol: float
    checks: List[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((c.max_rel_err for c in self.checks), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    @property
    def disconnected(self) -> List[str]:
        return [c.name for c in self.checks if c.disconnected]

    def to_dict(self) -> dict:
        return {
            "tol": self.tol,
            "max_rel_err": self.max_rel_err,
            "passed": self.passed,
            "disconnected": self.disconnected,
            "checks": [asdict(c) for c in self.checks],
        }


def _evaluate(loss_fn: Callable[[], Tensor]) -> float:
    with no_grad():
        return float(loss_fn().data)


def backward_and_gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    names: Optional[Sequence[str]] = None,
    max_entries: int = 64,
    seed: int = 0,
) -> GradcheckReport:
    """Back-propagate ``loss_fn()`` and check every parameter gradient.

    ``loss_fn`` rebuilds the graph from the current parameter values; it is
    called once with gradients enabled and twice per checked coordinate.
    Parameters should be f64 for the comparison to be meaningful.

    Args:
        loss_fn: Zero-argument closure returning a scalar Tensor
        params: Leaf tensors to differentiate
        eps: Central-difference step
        tol: Pass threshold on the maximum relative error
        names: Labels for the report (defaults to param.name or the index)
        max_entries: Coordinates checked per tensor (all when the tensor is smaller)
        seed: Seed of the coordinate sampler

    Returns:
        GradcheckReport; analytic gradients are left in ``param.grad``
    """
    for p in params:
        p.grad = None
        p.requires_grad = True
    loss = loss_fn()
    if loss.size != 1:
        raise ShapeError(f"gradcheck: loss must be a scalar, got shape {loss.shape}")
    loss.backward()

    rng = np.random.default_rng(seed)
    report = GradcheckReport(tol=tol)
    for i, p in enumerate(params):
        label = (names[i] if names is not None else None) or p.name or f"param{i}"
        disconnected = p.grad is None
        analytic = np.zeros_like(p.data) if disconnected else p.grad
        if disconnected:
            p.grad = analytic

        if p.size <= max_entries:
            coords = np.arange(p.size)
        else:
            coords = np.sort(rng.choice(p.size, size=max_entries, replace=False))

        original = p.data
        numeric = np.empty(len(coords), dtype=np.float64)
        for k, flat in enumerate(coords):
            shifted = original.copy()
            shifted.reshape(-1)[flat] += eps
            p.data = shifted
            f_plus = _evaluate(loss_fn)
            shifted.reshape(-1)[flat] = original.reshape(-1)[flat] - eps
            f_minus = _evaluate(loss_fn)
            numeric[k] = (f_plus - f_minus) / (2.0 * eps)
        p.data = original

        picked = analytic.reshape(-1)[coords].astype(np.float64)
        abs_err = float(np.max(np.abs(picked - numeric), initial=0.0))
        scale = max(
            float(np.max(np.abs(picked), initial=0.0)),
            float(np.max(np.abs(numeric), initial=0.0)),
            REL_ERR_FLOOR,
        )
        check = ParamCheck(
            name=label,
            shape=tuple(p.shape),
            n_checked=len(coords),
            max_abs_err=abs_err,
            max_rel_err=abs_err / scale,
            disconnected=disconnected,
        )
        report.checks.append(check)
        logger.debug(f"gradcheck {label}: rel_err={check.max_rel_err:.3e} checked={check.n_checked}")

    return report


__all__ = ["ParamCheck", "GradcheckReport", "backward_and_gradcheck", "REL_ERR_FLOOR"]
