"""Central finite-difference check of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: list[float] = field(default_factory=list)
    analytic: list[np.ndarray] = field(default_factory=list)
    numeric: list[np.ndarray] = field(default_factory=list)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def rel_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_grad(f: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to every entry of ``param``."""
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("finite-difference gradient is not finite")
    return out


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> GradCheckReport:
    """Compare ``backward()`` gradients of scalar ``f()`` against central differences.

    Every parameter must be float64. ``f`` is re-evaluated for each
    perturbation, so it has to be a deterministic function of ``params``.
    """
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("grad_check needs float64 parameters")
        p.requires_grad = True
        p.zero_grad()
    loss = f()
    if loss.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError("function value is not finite")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    if not all(np.all(np.isfinite(a)) for a in analytic):
        raise NonFiniteError("analytic gradient is not finite")

    numeric = [numeric_grad(f, p, h) for p in params]
    errs = [float(rel_error(a, n).max()) if a.size else 0.0 for a, n in zip(analytic, numeric)]
    return GradCheckReport(max(errs, default=0.0), errs, analytic, numeric)
