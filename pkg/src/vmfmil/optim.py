"""Limited-memory quasi-Newton minimizer with a strong-Wolfe line search.

Shared by the detection head (sigmoid cross-entropy), the MI-SVM baseline
(squared hinge), and the feature-space objectness model (logistic loss).
Nocedal & Wright algorithms 3.5/3.6 (line search + zoom) and 7.4 (two-loop
recursion).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

FunGrad = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass
class StepRecord:
    alpha: float
    f0: float
    f1: float
    dg0: float  # directional derivative at alpha=0
    dg1: float  # directional derivative at the accepted step


@dataclass
class MinimizeResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_iters: int
    converged: bool
    steps: list[StepRecord] = field(default_factory=list)


def _zoom(fg_alpha, alpha_lo, alpha_hi, f_lo, f0, dg0, c1, c2, max_zoom=30):
    for _ in range(max_zoom):
        alpha = 0.5 * (alpha_lo + alpha_hi)
        f, dg = fg_alpha(alpha)
        if f > f0 + c1 * alpha * dg0 or f >= f_lo:
            alpha_hi = alpha
        else:
            if abs(dg) <= -c2 * dg0:
                return alpha, f, dg
            if dg * (alpha_hi - alpha_lo) >= 0:
                alpha_hi = alpha_lo
            alpha_lo, f_lo = alpha, f
    f, dg = fg_alpha(alpha_lo)
    return alpha_lo, f, dg


def strong_wolfe_search(
    fun_grad: FunGrad,
    x: np.ndarray,
    p: np.ndarray,
    f0: float,
    g0: np.ndarray,
    c1: float = 1e-4,
    c2: float = 0.9,
    alpha0: float = 1.0,
    max_iters: int = 25,
):
    """Return (alpha, f, g, dg) satisfying the strong Wolfe conditions."""
    dg0 = float(g0 @ p)
    if dg0 >= 0:
        raise ValueError("search direction is not a descent direction")
    cache = {}

    def fg_alpha(a):
        if a not in cache:
            f, g = fun_grad(x + a * p)
            cache[a] = (f, g)
        f, g = cache[a]
        return f, float(g @ p)

    alpha_prev, f_prev = 0.0, f0
    alpha = alpha0
    for i in range(max_iters):
        f, dg = fg_alpha(alpha)
        if f > f0 + c1 * alpha * dg0 or (i > 0 and f >= f_prev):
            alpha, f, dg = _zoom(fg_alpha, alpha_prev, alpha, f_prev, f0, dg0, c1, c2)
            break
        if abs(dg) <= -c2 * dg0:
            break
        if dg >= 0:
            alpha, f, dg = _zoom(fg_alpha, alpha, alpha_prev, f, f0, dg0, c1, c2)
            break
        alpha_prev, f_prev = alpha, f
        alpha = min(2.0 * alpha, 1e10)
    f, g = cache.get(alpha, fun_grad(x + alpha * p))
    return alpha, f, g, float(g @ p), dg0


def minimize_lbfgs(
    fun_grad: FunGrad,
    x0: np.ndarray,
    gtol: float = 1e-6,
    max_iters: int = 200,
    memory: int = 10,
    c1: float = 1e-4,
    c2: float = 0.9,
    record_steps: bool = False,
) -> MinimizeResult:
    """Minimize a smooth function; stop when the gradient inf-norm < gtol."""
    x = np.asarray(x0, dtype=np.float64).copy()
    f, g = fun_grad(x)
    if not np.isfinite(f):
        raise FloatingPointError("non-finite objective at the starting point")
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    rho_hist: list[float] = []
    steps: list[StepRecord] = []
    for it in range(max_iters):
        if np.max(np.abs(g)) < gtol:
            return MinimizeResult(x, f, g, it, True, steps)
        # Two-loop recursion.
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if y_hist:
            gamma = (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
            q *= gamma
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        p = -q
        if p @ g >= 0:  # safeguard: fall back to steepest descent
            p = -g
            s_hist.clear(); y_hist.clear(); rho_hist.clear()
        alpha, f_new, g_new, dg1, dg0 = strong_wolfe_search(
            fun_grad, x, p, f, g, c1=c1, c2=c2,
            alpha0=1.0 if y_hist else min(1.0, 1.0 / max(np.max(np.abs(g)), 1e-12)),
        )
        if not np.isfinite(f_new):
            raise FloatingPointError(f"non-finite objective at iteration {it}")
        if record_steps:
            steps.append(StepRecord(alpha=alpha, f0=f, f1=f_new, dg0=dg0, dg1=dg1))
        s = alpha * p
        y = g_new - g
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > memory:
                s_hist.pop(0); y_hist.pop(0); rho_hist.pop(0)
        x = x + s
        f, g = f_new, g_new
    return MinimizeResult(x, f, g, max_iters, bool(np.max(np.abs(g)) < gtol), steps)
