"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from tavce.errors import DTypeError, NonFiniteError
from tavce.tensor import Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    worst_index: tuple | None
    passed: bool

    @property
    def pass_(self) -> bool:
        return self.passed


def _rel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def numerical_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float) -> np.ndarray:
    grad = np.zeros_like(x)
    probe = x.copy()
    for idx in np.ndindex(*x.shape):
        orig = probe[idx]
        probe[idx] = orig + eps
        hi = f(Tensor(probe.copy())).item()
        probe[idx] = orig - eps
        lo = f(Tensor(probe.copy())).item()
        probe[idx] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteError("finite-difference probe")
        grad[idx] = (hi - lo) / (2 * eps)
    return grad


def check_gradients(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare ``backward`` against central differences for a scalar ``f(x)``.

    ``x`` must be float64. Relative error per coordinate uses the
    ``max(|a|, |b|, 1e-8)`` denominator; the check passes iff the largest is
    within ``tol``. Non-finite evaluations raise instead of passing.
    """
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=None, copy=True)
    if x.dtype != np.float64:
        raise DTypeError("gradient checks run in float64")
    leaf = Tensor(x.copy(), requires_grad=True)
    out = f(leaf)
    if out.requires_grad:
        backward(out)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x)
    else:
        # constant in x
        analytic = np.zeros_like(x)
    numeric = numerical_gradient(f, x, eps)
    rel = _rel(analytic, numeric)
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else None
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(
        max_rel_error=max_rel,
        max_abs_error=float(np.abs(analytic - numeric).max()) if rel.size else 0.0,
        worst_index=tuple(int(i) for i in worst) if worst is not None else None,
        passed=max_rel <= tol,
    )


def check_gradients_multi(
    f: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Check every argument of ``f(*inputs)`` in turn; report the worst one."""
    worst: GradCheckReport | None = None
    for k in range(len(inputs)):
        def partial(t: Tensor, k=k):
            args = [Tensor(a) for a in inputs]
            args[k] = t
            return f(*args)

        rep = check_gradients(partial, inputs[k], eps, tol)
        if worst is None or rep.max_rel_error > worst.max_rel_error:
            worst = rep
    assert worst is not None
    worst.passed = worst.max_rel_error <= tol
    return worst
