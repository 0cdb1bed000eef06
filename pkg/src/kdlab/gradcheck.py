"""Central finite-difference gradient checking.

The numerical side only ever calls the forward function, so it is an
independent oracle for the analytic gradients produced by ``backward``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad, zero_grads


def finite_difference_grads(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
) -> list[np.ndarray]:
    """Central differences of the scalar ``fn()`` w.r.t. each param element.

    ``fn`` must recompute its forward pass from the params' current ``data``
    on every call; the data is perturbed in place and restored.
    """
    grads = []
    with no_grad():
        for p in params:
            flat = p.data.reshape(-1)
            g = np.empty_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                hi = fn().item()
                flat[i] = orig - step
                lo = fn().item()
                flat[i] = orig
                g[i] = (hi - lo) / (2.0 * step)
            grads.append(g.reshape(p.data.shape))
    return grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(1, |a|, |n|), elementwise."""
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
) -> float:
    """Compare backward() against central differences; return the worst error.

    Raises AssertionError when any parameter's relative error exceeds ``tol``.
    """
    zero_grads(params)
    backward(fn())
    numeric = finite_difference_grads(fn, params, step=step)
    worst = 0.0
    for p, num in zip(params, numeric):
        if p.grad is None:
            ana = np.zeros_like(num)
        else:
            ana = p.grad
        err = max_relative_error(ana, num)
        worst = max(worst, err)
        if err > tol:
            raise AssertionError(
                f"gradient mismatch (rel err {err:.3e} > {tol:.1e}) for parameter of shape {p.shape}"
            )
    return worst
