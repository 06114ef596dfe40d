"""Limited-memory BFGS with a backtracking line search.

Every accepted iterate strictly decreases the objective, so the returned trace
is monotone.  The curvature pair is stored only when s^T y > 0, which keeps
the implicit inverse Hessian positive definite.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import numpy.typing as npt

Array = npt.NDArray[np.float64]


@dataclass
class LbfgsResult:
    x: Array
    f: float
    trace: list[float] = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False
    message: str = ""


def _two_loop(g: Array, pairs: deque) -> Array:
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def lbfgs(
    fun: Callable[[Array], tuple[float, Array]],
    x0: Array,
    memory: int = 10,
    max_iter: int = 100,
    gtol: float = 1e-8,
    rel_tol: float = 1e-9,
    c1: float = 1e-4,
    max_backtracks: int = 30,
) -> LbfgsResult:
    """
    Minimize ``fun`` which returns (value, gradient).
    Stops on small gradient, small relative decrease, or line-search failure.
    """
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    if not np.isfinite(f):
        return LbfgsResult(x, f, [f], 0, False, "non-finite initial objective")
    trace = [float(f)]
    pairs: deque = deque(maxlen=memory)
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) < gtol:
            return LbfgsResult(x, f, trace, it - 1, True, "gradient tolerance")
        with np.errstate(over="ignore", invalid="ignore"):
            d = -_two_loop(g, pairs)
            slope = g @ d
        if not slope < 0.0:
            pairs.clear()
            d, slope = -g, -(g @ g)
        step = 1.0 if pairs else min(1.0, 1.0 / max(np.linalg.norm(g), 1e-12))
        for _ in range(max_backtracks):
            x_new = x + step * d
            f_new, g_new = fun(x_new)
            if np.isfinite(f_new) and f_new <= f + c1 * step * slope and f_new < f:
                break
            step *= 0.5
        else:
            return LbfgsResult(x, f, trace, it - 1, False, "line search failed")
        s, y = x_new - x, g_new - g
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            pairs.append((s, y, 1.0 / sy))
        rel = (f - f_new) / max(abs(f), 1e-300)
        x, f, g = x_new, f_new, g_new
        trace.append(float(f))
        if rel < rel_tol:
            return LbfgsResult(x, f, trace, it, True, "relative decrease tolerance")
    return LbfgsResult(x, f, trace, max_iter, False, "iteration limit")
