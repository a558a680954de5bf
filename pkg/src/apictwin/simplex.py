"""Nelder-Mead downhill simplex minimiser.

Reflection, expansion, contraction and shrink coefficients are the classic
1, 2, 1/2 and 1/2.  The objective must return a finite float everywhere the
simplex goes; encode constraints through reparametrisation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

ALPHA, GAMMA, RHO, SIGMA = 1.0, 2.0, 0.5, 0.5


class NonFiniteObjectiveError(FloatingPointError):
    def __init__(self, x, value):
        super().__init__(f"objective returned {value!r} at x={list(np.round(x, 12))}")
        self.x = np.asarray(x)
        self.value = value


@dataclass
class SimplexResult:
    x: np.ndarray
    fun: float
    nit: int
    nfev: int
    converged: bool
    improved: bool
    simplex: np.ndarray
    fsim: np.ndarray
    message: str = ""

    @property
    def spread(self) -> np.ndarray:
        """Per-coordinate half-range of the final simplex."""
        return 0.5 * (self.simplex.max(axis=0) - self.simplex.min(axis=0))


def initial_simplex(x0, step=None) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    if step is None:
        step = np.where(x0 != 0, 0.05 * np.abs(x0), 0.00025)
    step = np.broadcast_to(np.asarray(step, dtype=float), (n,))
    sim = np.tile(x0, (n + 1, 1))
    for i in range(n):
        sim[i + 1, i] += step[i]
    return sim


def _minimize_once(f, sim, xtol, ftol, max_iter, max_fev, counter):
    n = sim.shape[1]
    fsim = np.array([f(x) for x in sim])
    order = np.argsort(fsim, kind="stable")
    sim, fsim = sim[order], fsim[order]
    nit = 0
    converged = False
    while True:
        diam = np.max(np.abs(sim[1:] - sim[0])) if n else 0.0
        if diam <= xtol or (fsim[-1] - fsim[0]) <= ftol:
            converged = True
            break
        if nit >= max_iter or counter[0] >= max_fev:
            break
        nit += 1
        c = sim[:-1].mean(axis=0)
        xr = c + ALPHA * (c - sim[-1])
        fr = f(xr)
        if fr < fsim[0]:
            xe = c + GAMMA * (xr - c)
            fe = f(xe)
            if fe < fr:
                sim[-1], fsim[-1] = xe, fe
            else:
                sim[-1], fsim[-1] = xr, fr
        elif fr < fsim[-2]:
            sim[-1], fsim[-1] = xr, fr
        else:
            if fr < fsim[-1]:
                xc = c + RHO * (xr - c)
                fc = f(xc)
                accept = fc <= fr
            else:
                xc = c + RHO * (sim[-1] - c)
                fc = f(xc)
                accept = fc < fsim[-1]
            if accept:
                sim[-1], fsim[-1] = xc, fc
            else:
                sim[1:] = sim[0] + SIGMA * (sim[1:] - sim[0])
                fsim[1:] = [f(x) for x in sim[1:]]
        order = np.argsort(fsim, kind="stable")
        sim, fsim = sim[order], fsim[order]
    return sim, fsim, nit, converged


def nelder_mead(
    f: Callable[[np.ndarray], float],
    x0: Sequence[float] | None = None,
    step=None,
    *,
    simplex=None,
    xtol: float = 1e-8,
    ftol: float = 0.0,
    max_iter: int | None = None,
    max_fev: int | None = None,
    restarts: int = 0,
) -> SimplexResult:
    """Minimise ``f`` starting from ``x0`` (or an explicit initial ``simplex``).

    Stops when every vertex lies within ``xtol`` of the best one (per
    coordinate), when the spread of function values is at most ``ftol``,
    or when the iteration/evaluation budget runs out.  ``restarts`` rebuilds
    the simplex around the incumbent after convergence, which guards
    against premature collapse on elongated valleys.
    """
    if simplex is None:
        if x0 is None:
            raise ValueError("give x0 or an initial simplex")
        sim = initial_simplex(x0, step)
    else:
        sim = np.array(simplex, dtype=float)
        if sim.ndim != 2 or sim.shape[0] != sim.shape[1] + 1:
            raise ValueError("simplex must have shape (n + 1, n)")
    n = sim.shape[1]
    max_iter = 400 * n if max_iter is None else max_iter
    max_fev = 800 * n if max_fev is None else max_fev
    counter = [0]
    first_value = []

    def fw(x):
        counter[0] += 1
        v = f(x)
        try:
            v = float(v)
        except (TypeError, ValueError):
            raise NonFiniteObjectiveError(x, v) from None
        if not np.isfinite(v):
            raise NonFiniteObjectiveError(x, v)
        if not first_value:
            first_value.append(v)
        return v

    widths = np.abs(sim[1:] - sim[0]).max(axis=0)
    sim, fsim, total_it, converged = _minimize_once(fw, sim, xtol, ftol, max_iter, max_fev, counter)
    for _ in range(restarts):
        if counter[0] >= max_fev or total_it >= max_iter:
            break
        best = fsim[0]
        restart = initial_simplex(sim[0], np.maximum(widths * 0.1, 10 * xtol))
        sim2, fsim2, nit, conv2 = _minimize_once(
            fw, restart, xtol, ftol, max_iter - total_it, max_fev, counter
        )
        total_it += nit
        if fsim2[0] < fsim[0]:
            sim, fsim, converged = sim2, fsim2, conv2
        if not fsim2[0] < best:
            break
    improved = bool(fsim[0] < first_value[0])
    msg = "converged" if converged else "iteration budget exhausted"
    if not improved:
        msg += "; no improvement over the starting point"
    return SimplexResult(
        x=sim[0].copy(),
        fun=float(fsim[0]),
        nit=total_it,
        nfev=counter[0],
        converged=converged,
        improved=improved,
        simplex=sim,
        fsim=fsim,
        message=msg,
    )
