"""Full-batch L-BFGS with a strong-Wolfe line search, and Adam."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LBFGS = "lbfgs"
ADAM = "adam"

# curvature pairs with s.y at or below this (times |s||y| when relative) are not stored
CURVATURE_EPS = 1e-10
FALLBACK_STEP = 1e-4
ROUNDOFF_F = 1e-12


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = LBFGS
    epochs: int = 100
    history: int = 10
    max_linesearch: int = 25
    tol_grad: float = 1e-12
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int | None = None
    shuffle_seed: int = 0
    curvature_eps: float = CURVATURE_EPS
    curvature_relative: bool = True

    def __post_init__(self):
        if self.kind not in (LBFGS, ADAM):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.kind == LBFGS and (self.history < 1 or self.max_linesearch < 1):
            raise ValueError("L-BFGS needs history >= 1 and max_linesearch >= 1")
        if self.kind == ADAM and not self.lr > 0:
            raise ValueError("Adam needs lr > 0")


@dataclass
class LBFGSState:
    s_hist: list = field(default_factory=list)
    y_hist: list = field(default_factory=list)
    f: float | None = None
    g: np.ndarray | None = None
    n_iter: int = 0
    func_evals: int = 0
    status: str = "init"
    fallbacks: int = 0


def two_loop(g, s_hist, y_hist):
    """Return ``H g`` for the L-BFGS inverse-Hessian approximation."""
    q = g.copy()
    alphas = []
    rhos = [1.0 / (y @ s) for s, y in zip(s_hist, y_hist)]
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rhos)):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= (s @ y) / (y @ y)
    for s, y, rho, a in zip(s_hist, y_hist, rhos, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def _cubic_min(x1, f1, g1, x2, f2, g2, lo, hi):
    """Minimizer of the cubic through two points with slopes, clipped to [lo, hi]."""
    with np.errstate(all="ignore"):
        d1 = g1 + g2 - 3 * (f1 - f2) / (x1 - x2)
        d2sq = d1 * d1 - g1 * g2
        if not (math.isfinite(d1) and math.isfinite(d2sq)) or d2sq < 0:
            return 0.5 * (lo + hi)
        d2 = math.sqrt(d2sq)
        if x1 <= x2:
            t = x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2 * d2))
        else:
            t = x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2 * d2))
    if not math.isfinite(t):
        return 0.5 * (lo + hi)
    return min(max(t, lo), hi)


def _approx_wolfe(f, gtd, f0, gtd0, c1, c2):
    # Once f has stopped changing beyond round-off the Armijo test is noise;
    # accept on slope alone (Hager-Zhang approximate Wolfe conditions).
    if not math.isfinite(f) or abs(f - f0) > ROUNDOFF_F * abs(f0):
        return False
    return (2 * c1 - 1) * gtd0 >= gtd >= c2 * gtd0


def strong_wolfe(fun, x, d, t, f0, g0, c1=1e-4, c2=0.9, max_evals=25):
    """Bracketing + zoom line search for the strong Wolfe conditions.

    Returns ``(t, f, g, evals, ok)``. When the zoom runs out of evaluations
    or the bracket collapses, the best point with sufficient decrease is
    returned with ``ok=True``; ``ok=False`` means no such point was found.
    """
    gtd0 = float(g0 @ d)
    evals = 0
    t_prev, f_prev, g_prev, gtd_prev = 0.0, f0, g0, gtd0
    bracket = None
    while evals < max_evals:
        f, g = fun(x + t * d)
        evals += 1
        gtd = float(g @ d) if math.isfinite(f) else math.nan
        if _approx_wolfe(f, gtd, f0, gtd0, c1, c2):
            return t, f, g, evals, True
        if not math.isfinite(f) or f > f0 + c1 * t * gtd0 or (evals > 1 and f >= f_prev):
            bracket = [(t_prev, f_prev, g_prev, gtd_prev), (t, f, g, gtd)]
            break
        if abs(gtd) <= -c2 * gtd0:
            return t, f, g, evals, True
        if gtd >= 0:
            bracket = [(t, f, g, gtd), (t_prev, f_prev, g_prev, gtd_prev)]
            break
        t_next = _cubic_min(t_prev, f_prev, gtd_prev, t, f, gtd, t + 0.01 * (t - t_prev), 10 * t)
        t_prev, f_prev, g_prev, gtd_prev = t, f, g, gtd
        t = t_next
    if bracket is None:
        ok = t_prev > 0
        return t_prev, f_prev, g_prev, evals, ok

    lo, hi = bracket
    while evals < max_evals:
        t_lo, f_lo, _, gtd_lo = lo
        t_hi, f_hi, _, gtd_hi = hi
        width = abs(t_hi - t_lo)
        if width <= 1e-12 * max(abs(t_lo), abs(t_hi), 1e-300) or width == 0:
            break
        a, b = min(t_lo, t_hi), max(t_lo, t_hi)
        if math.isfinite(f_hi) and math.isfinite(gtd_hi):
            tj = _cubic_min(t_lo, f_lo, gtd_lo, t_hi, f_hi, gtd_hi, a, b)
        else:
            tj = 0.5 * (a + b)
        # keep the trial point away from the bracket ends
        tj = min(max(tj, a + 0.1 * width), b - 0.1 * width)
        fj, gj = fun(x + tj * d)
        evals += 1
        gtdj = float(gj @ d) if math.isfinite(fj) else math.nan
        if not math.isfinite(fj) or fj > f0 + c1 * tj * gtd0 or fj >= f_lo:
            hi = (tj, fj, gj, gtdj)
            continue
        if abs(gtdj) <= -c2 * gtd0:
            return tj, fj, gj, evals, True
        if gtdj * (t_hi - t_lo) >= 0:
            hi = lo
        lo = (tj, fj, gj, gtdj)
    t_lo, f_lo, g_lo, _ = lo
    return t_lo, f_lo, g_lo, evals, t_lo > 0 and f_lo < f0


def lbfgs_step(x, fun, state: LBFGSState | None = None, config: OptimizerConfig | None = None):
    """One L-BFGS iteration on ``fun(x) -> (f, grad)``.

    Returns ``(x_new, state)``; ``state.f``/``state.g`` hold the objective at
    ``x_new``. A failed line search falls back to ``x - 1e-4 * g``, clears
    the curvature history and sets ``state.status = "fallback"``.
    """
    config = config or OptimizerConfig()
    state = state or LBFGSState()
    x = np.asarray(x, dtype=np.float64)
    if state.g is None:
        state.f, state.g = fun(x)
        state.func_evals += 1
    f0, g0 = state.f, state.g
    if not np.max(np.abs(g0), initial=0.0) > config.tol_grad:
        state.status = "converged"
        return x, state

    d = -two_loop(g0, state.s_hist, state.y_hist)
    gtd = float(g0 @ d)
    if not gtd < 0:
        state.s_hist.clear()
        state.y_hist.clear()
        d = -g0
        gtd = float(g0 @ d)
    t0 = 1.0 if state.s_hist else min(1.0, 1.0 / np.sum(np.abs(g0)))

    t, f, g, evals, ok = strong_wolfe(fun, x, d, t0, f0, g0, max_evals=config.max_linesearch)
    state.func_evals += evals
    state.n_iter += 1
    if ok:
        x_new = x + t * d
        s, y = x_new - x, g - g0
        sy = float(s @ y)
        floor = config.curvature_eps
        if config.curvature_relative:
            floor *= float(np.linalg.norm(s) * np.linalg.norm(y))
        if sy > floor:
            state.s_hist.append(s)
            state.y_hist.append(y)
            if len(state.s_hist) > config.history:
                del state.s_hist[0], state.y_hist[0]
        state.status = "ok"
    else:
        x_new = x - FALLBACK_STEP * g0
        f, g = fun(x_new)
        state.func_evals += 1
        state.s_hist.clear()
        state.y_hist.clear()
        state.fallbacks += 1
        state.status = "fallback"
    state.f, state.g = f, g
    return x_new, state


def minimize_lbfgs(fun, x0, max_iter=100, config: OptimizerConfig | None = None, gtol=None):
    """Run :func:`lbfgs_step` until the gradient max-norm is below ``gtol``."""
    config = config or OptimizerConfig()
    gtol = config.tol_grad if gtol is None else gtol
    x, state = np.asarray(x0, dtype=np.float64), None
    for _ in range(max_iter):
        x, state = lbfgs_step(x, fun, state, config)
        if state.status == "converged" or np.max(np.abs(state.g)) <= gtol:
            break
    return x, state


@dataclass
class AdamState:
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0


def adam_step(x, g, state: AdamState | None = None, config: OptimizerConfig | None = None):
    """Bias-corrected Adam update of the flat vector ``x`` given gradient ``g``."""
    config = config or OptimizerConfig(kind=ADAM)
    state = state or AdamState()
    if state.m is None:
        state.m = np.zeros_like(x)
        state.v = np.zeros_like(x)
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    state.m = b1 * state.m + (1 - b1) * g
    state.v = b2 * state.v + (1 - b2) * g * g
    m_hat = state.m / (1 - b1**state.t)
    v_hat = state.v / (1 - b2**state.t)
    return x - config.lr * m_hat / (np.sqrt(v_hat) + config.eps), state
