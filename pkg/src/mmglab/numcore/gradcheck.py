"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..errors import ConfigError
from .autograd import Tensor, backprop


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    tolerance: float
    step: float
    rel_errors: np.ndarray = field(repr=False)
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)

    def worst_index(self) -> tuple[int, ...]:
        return tuple(int(i) for i in np.unravel_index(np.argmax(self.rel_errors), self.rel_errors.shape))


def numeric_gradient(fn: Callable[[], Tensor], param: Tensor, step: float) -> np.ndarray:
    """Central differences of ``fn()`` with respect to ``param.data`` in place."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = fn().item()
        flat[i] = orig - step
        minus = fn().item()
        flat[i] = orig
        out[i] = (plus - minus) / (2.0 * step)
    return grad


def finite_difference_check(
    fn: Callable[[], Tensor],
    param: Tensor,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    analytic: np.ndarray | None = None,
) -> GradCheckReport:
    """Compare the backprop gradient of ``fn`` w.r.t. ``param`` against
    central differences.

    ``fn`` rebuilds the graph from the current parameter values and returns a
    scalar. Relative error per coordinate is
    ``|a - n| / max(1, |a|, |n|)``. Passing ``analytic`` overrides the
    backprop result, which is how corrupted gradients are injected in tests.
    """
    if step <= 0:
        raise ConfigError("finite-difference step must be positive")
    if analytic is None:
        analytic = backprop(fn(), [param])[param]
    analytic = np.asarray(analytic, dtype=np.float64).reshape(param.shape)
    numeric = numeric_gradient(fn, param, step)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    rel = np.abs(analytic - numeric) / denom
    worst = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(worst <= tolerance, worst, tolerance, step, rel, analytic, numeric)
