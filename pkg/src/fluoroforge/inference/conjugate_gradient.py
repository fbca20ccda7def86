"""Box-constrained nonlinear conjugate gradient (Polak-Ribiere+, restarts, backtracking)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass
class CGResult:
    x: np.ndarray
    fun: float
    nit: int
    nfev: int
    converged: bool


def _project(x, lower, upper):
    return np.minimum(np.maximum(x, lower), upper)


def _projected_gradient(x, g, lower, upper):
    pg = g.copy()
    pg[(x <= lower) & (g > 0)] = 0.0
    pg[(x >= upper) & (g < 0)] = 0.0
    return pg


def _line_search(fun, x, f, g, d, t, lower, upper, c1, max_ls, n_secant):
    """Backtrack until Armijo holds, then polish with secant steps on the slope.

    Returns ``(t, x_new, f_new, g_new, nfev)`` or ``None`` if no decrease was found.
    """
    slope0 = float(g @ d)
    nfev = 0
    best = None
    for _ in range(max_ls):
        xt = _project(x + t * d, lower, upper)
        ft, gt = fun(xt)
        nfev += 1
        if ft < f and ft <= f + c1 * float(g @ (xt - x)):
            best = (t, xt, ft, gt)
            break
        t *= 0.5
    if best is None:
        return None

    # secant refinement of the minimizer of phi(t) = f(x + t d)
    lo_t, lo_slope = 0.0, slope0
    for _ in range(n_secant):
        t_b, _, f_b, g_b = best
        slope_b = float(g_b @ d)
        denom = lo_slope - slope_b
        if denom == 0:
            break
        t_new = lo_t + (t_b - lo_t) * lo_slope / denom
        if slope_b < 0:
            t_new = min(t_new, 4.0 * t_b)
        if not np.isfinite(t_new) or t_new <= 0 or abs(t_new - t_b) <= 1e-10 * t_b:
            break
        xt = _project(x + t_new * d, lower, upper)
        ft, gt = fun(xt)
        nfev += 1
        if ft >= f_b:
            break
        lo_t, lo_slope = t_b, slope_b
        best = (t_new, xt, ft, gt)
    return best + (nfev,)


def minimize_cg(fun: Callable[[np.ndarray], tuple[float, np.ndarray]], x0, lower=None, upper=None,
                max_iter: int = 50, gtol: float = 1e-8, ftol: float = 1e-12,
                c1: float = 1e-4, max_step: float = 0.5, max_ls: int = 40,
                n_secant: int = 3) -> CGResult:
    """Minimize ``fun`` (returning value and gradient) inside ``[lower, upper]``.

    Directions follow Polak-Ribiere+ on the projected gradient, restarting
    with steepest descent every ``n`` iterations or when the direction is not
    a descent direction. Steps are projected onto the box, accepted by Armijo
    backtracking and then refined by a few secant steps on the directional
    derivative. The first trial step moves no coordinate by more than
    ``max_step``; later trials start from the previous step length.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    n = x.size
    lower = np.full(n, -np.inf) if lower is None else np.asarray(lower, dtype=np.float64)
    upper = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=np.float64)
    x = _project(x, lower, upper)
    f, g = fun(x)
    nfev = 1
    pg = _projected_gradient(x, g, lower, upper)
    d = -pg
    t_prev = None
    converged = False
    nit = 0

    for nit in range(1, max_iter + 1):
        if np.max(np.abs(pg)) <= gtol:
            converged = True
            break
        if float(g @ d) >= 0:
            d = -pg
        dmax = float(np.max(np.abs(d)))
        t = max_step / dmax if t_prev is None else min(2.0 * t_prev, 1e3 * max_step / dmax)

        found = _line_search(fun, x, f, g, d, t, lower, upper, c1, max_ls, n_secant)
        if found is None:
            converged = True
            break
        t_prev, x_new, f_new, g_new, k = found
        nfev += k

        pg_new = _projected_gradient(x_new, g_new, lower, upper)
        small_f = (f - f_new) <= ftol * (1.0 + abs(f))
        denom = float(pg @ pg)
        beta = max(0.0, float(pg_new @ (pg_new - pg)) / denom) if denom > 0 else 0.0
        if nit % n == 0:
            beta = 0.0
        d = -pg_new + beta * d
        # components pushing against an active bound go nowhere
        d[((x_new <= lower) & (d < 0)) | ((x_new >= upper) & (d > 0))] = 0.0
        x, f, g, pg = x_new, f_new, g_new, pg_new
        if small_f:
            converged = True
            break

    return CGResult(x=x, fun=float(f), nit=nit, nfev=nfev, converged=converged)
