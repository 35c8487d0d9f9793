"""Central finite-difference verification of taped gradients.

``gradcheck`` runs a function twice: once under a tape to get analytic
gradients, then coordinate-by-coordinate with +/- eps perturbations in
float64. Agreement is summarized as a normalized error per input,

    err = ||analytic - numeric|| / max(||analytic||, ||numeric||, tiny)

so both absolute-zero and large-gradient cases behave.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor

__all__ = ["gradcheck", "numeric_gradient"]

_TINY = 1e-12


def _eval(fn, arrays) -> float:
    out = fn(*[Tensor(a) for a in arrays])
    if out.data.ndim != 0:
        raise ValueError("gradcheck target must return a scalar")
    return float(out.data)


def numeric_gradient(fn, arrays, index: int, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``fn`` w.r.t. ``arrays[index]``."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    target = arrays[index]
    grad = np.empty_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        hi = _eval(fn, arrays)
        flat[j] = orig - eps
        lo = _eval(fn, arrays)
        flat[j] = orig
        gflat[j] = (hi - lo) / (2.0 * eps)
    return grad


def gradcheck(fn, arrays, eps: float = 1e-5) -> float:
    """Worst normalized gradient error of scalar-valued ``fn`` over all inputs.

    ``fn`` takes one Tensor per entry of ``arrays`` and returns a scalar
    Tensor. All checking happens in float64 regardless of input dtype.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = fn(*leaves)
    if loss.data.ndim != 0:
        raise ValueError("gradcheck target must return a scalar")
    analytic = tape.gradients(loss, leaves)

    worst = 0.0
    for i, leaf in enumerate(leaves):
        a = analytic[leaf]
        n = numeric_gradient(fn, arrays, i, eps)
        denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)), _TINY)
        err = float(np.linalg.norm(a - n)) / denom
        worst = max(worst, err)
    return worst
