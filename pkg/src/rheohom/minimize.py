"""Nonlinear conjugate gradient with Polak-Ribiere restarts and Armijo backtracking.

Shared by the periodic cell solver and the bounded-domain viscous substep.
The objective is any convex functional exposing value and value+gradient;
an optional preconditioner maps gradients to search-direction space (the
cell solver passes the inverse symbol of the constant-coefficient operator).
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class MinimizeResult:
    x: np.ndarray
    fun: float
    grad_norm: float
    iterations: int
    converged: bool
    status: str
    residual: float = np.nan
    energy_history: list = field(default_factory=list)


def minimize_ncg(value, value_grad, x0, *, precond=None, stop_check=None,
                 grad_tol=1e-12, max_iter=2000, check_every=5,
                 armijo_c=1e-4, max_halvings=50, t_init=1.0, stall_iters=60):
    """Minimize a smooth convex functional over flat arrays.

    value(x) -> float, value_grad(x) -> (float, array).  stop_check(x) ->
    (residual, ok) is the caller's convergence measure, polled every
    `check_every` accepted steps; without one, the gradient norm is used.
    A NaN or non-decreasing trial in the line search halves the step;
    `max_halvings` consecutive failures abort with the best iterate.
    `stall_iters` accepted steps without a resolvable energy decrease stop
    the iteration at the double-precision floor.  Accepted energies are
    strictly nonincreasing by construction.
    """
    if precond is None:
        precond = lambda g: g
    x = np.array(x0, dtype=float, copy=True)
    f, g = value_grad(x)
    z = precond(g)
    d = -z
    gz = float(np.vdot(g, z))
    t = t_init
    history = [f]
    residual = np.nan
    stalled = 0

    def check(xc):
        nonlocal residual
        if stop_check is None:
            return float(np.linalg.norm(g)) <= grad_tol
        residual, ok = stop_check(xc)
        return ok

    if check(x):
        return MinimizeResult(x=x, fun=f, grad_norm=float(np.linalg.norm(g)),
                              iterations=0, converged=True, status="converged",
                              residual=residual, energy_history=history)

    for it in range(1, max_iter + 1):
        slope = float(np.vdot(g, d))
        if not np.isfinite(slope) or slope >= 0.0:
            d = -z
            slope = -gz
            if slope >= 0.0:  # gradient numerically zero
                return MinimizeResult(x=x, fun=f, grad_norm=float(np.linalg.norm(g)),
                                      iterations=it - 1, converged=check(x),
                                      status="stationary", residual=residual,
                                      energy_history=history)
        # backtracking Armijo; NaN trials count as failures
        accepted = False
        for _ in range(max_halvings):
            x_new = x + t * d
            f_new = value(x_new)
            if np.isfinite(f_new) and f_new <= f + armijo_c * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            return MinimizeResult(x=x, fun=f, grad_norm=float(np.linalg.norm(g)),
                                  iterations=it, converged=False,
                                  status="line_search_failed", residual=residual,
                                  energy_history=history)
        x = x_new
        f_old = f
        f_new, g_new = value_grad(x)
        f = f_new
        history.append(f)
        z_new = precond(g_new)
        gz_new = float(np.vdot(g_new, z_new))
        beta = max(0.0, float(np.vdot(g_new - g, z_new)) / gz) if gz > 0 else 0.0
        d = -z_new + beta * d
        g, z, gz = g_new, z_new, gz_new
        t = min(t * 2.0, 1e6)
        if (it % check_every == 0 or it == max_iter) and check(x):
            return MinimizeResult(x=x, fun=f, grad_norm=float(np.linalg.norm(g)),
                                  iterations=it, converged=True, status="converged",
                                  residual=residual, energy_history=history)
        if f_old - f <= 1e-14 * max(abs(f), 1e-30):
            stalled += 1
            if stalled >= stall_iters:
                return MinimizeResult(x=x, fun=f, grad_norm=float(np.linalg.norm(g)),
                                      iterations=it, converged=check(x),
                                      status="stagnated", residual=residual,
                                      energy_history=history)
        else:
            stalled = 0

    return MinimizeResult(x=x, fun=f, grad_norm=float(np.linalg.norm(g)),
                          iterations=max_iter, converged=False, status="max_iter",
                          residual=residual, energy_history=history)
