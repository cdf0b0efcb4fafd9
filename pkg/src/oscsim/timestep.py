"""Adaptive BDF1/BDF2 time marching and the steady-state driver."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .macro import BdfContext, ConvergenceError, MacroModel, NewtonReport, newton_solve

log = logging.getLogger(__name__)


class StepSizeUnderflow(RuntimeError):
    pass


def bdf_weights(order: int, steps) -> tuple[float, ...]:
    """Derivative weights at the newest time level on a nonuniform grid.

    Parameters
    ----------
    order : 1 or 2
    steps : sequence of float
        ``steps[0]`` is the current step ``t_N - t_{N-1}``, ``steps[1]`` the
        previous one (needed for order 2).

    Returns
    -------
    (w0, ..., w_order) such that ``u'(t_N) ~ sum_m w_m u(t_{N-m})``.
    """
    steps = [float(k) for k in np.atleast_1d(steps)]
    if order not in (1, 2):
        raise ValueError(f"unsupported BDF order {order}")
    if len(steps) < order or any(k <= 0 for k in steps[:order]):
        raise ValueError("need one positive step per order")
    k1 = steps[0]
    if order == 1:
        return (1.0 / k1, -1.0 / k1)
    k2 = steps[1]
    return ((2 * k1 + k2) / (k1 * (k1 + k2)),
            -(k1 + k2) / (k1 * k2),
            k1 / (k2 * (k1 + k2)))


@dataclass
class Trajectory:
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    photocurrent: list = field(default_factory=list)   # signed, A/m^2
    reports: list = field(default_factory=list)
    steady: bool = False
    rejected: int = 0

    @property
    def j_tot(self) -> np.ndarray:
        return np.abs(np.asarray(self.photocurrent))

    def sample(self, times) -> np.ndarray:
        """Linear interpolation of ``j_tot`` at the requested times."""
        return np.interp(times, self.times, self.j_tot)


def _context(hist_t, hist_y, t_new, order):
    """BDF context for the new level ``t_new`` from stored (time, full state) pairs."""
    order = min(order, len(hist_t))
    steps = [t_new - hist_t[-1]] + [hist_t[-m] - hist_t[-m - 1] for m in range(1, order)]
    w = bdf_weights(order, steps)
    return BdfContext(w, [hist_y[-m] for m in range(1, order + 1)])


def _error_scale(model, y, rtol, atol):
    s = model.variable_scales(y)
    floor = model.variable_scales(np.zeros_like(y))
    return rtol * s + atol * floor


def march(model: MacroModel, t_end: float, y0: np.ndarray | None = None, *,
          rtol: float = 1e-3, atol: float = 0.0, dt0: float = 1e-14,
          min_dt: float = 1e-20, max_dt: float | None = None, steady_tol: float = 1e-8,
          stop_at_steady: bool = True, newton_tol: float = 1e-9, max_steps: int = 5000,
          output_times=None) -> Trajectory:
    """Adaptive BDF integration with step-doubling error control.

    Each step is taken once with ``dt`` and twice with ``dt/2``.  The
    difference of the two results estimates the local error of the full
    step; the more accurate half-step result is kept, so the estimate is
    conservative by about ``2**p - 1`` and accumulated errors stay within
    ``rtol`` of the solution scale.  Order 1 is used until two steps have
    been accepted, order 2 afterwards.
    """
    max_dt = max_dt or t_end
    y = model.initial_state() if y0 is None else model.enforce_dirichlet(y0)
    hist_t = [0.0]
    hist_y = [model.full(y)]
    traj = Trajectory()
    traj.times.append(0.0)
    traj.states.append(y.copy())
    traj.photocurrent.append(model.photocurrent(y))
    t = 0.0
    dt = dt0
    accepted = 0

    def take(ht, hy, t_new, order, guess):
        bdf = _context(ht, hy, t_new, order)
        ynew, rep = newton_solve(model, guess, bdf, tol=newton_tol, eliminate_polaron=False)
        return ynew, rep, bdf

    for _ in range(max_steps):
        if t >= t_end * (1 - 1e-12):
            break
        dt = min(dt, max_dt, t_end - t)
        if dt < min_dt:
            raise StepSizeUnderflow(f"step size {dt:.3e} below min_dt at t={t:.3e}")
        order = 1 if accepted < 2 else 2
        p = order
        y_full, r_full, _ = take(hist_t, hist_y, t + dt, order, y)
        y_h1, r_h1, bdf_h1 = take(hist_t, hist_y, t + 0.5 * dt, order, y)
        ht = hist_t + [t + 0.5 * dt]
        hy = hist_y + [model.full(y_h1)]
        y_h2, r_h2, bdf_h2 = take(ht, hy, t + dt, order, y_h1) if r_h1.converged else (y_h1, r_h1, None)
        if not (r_full.converged and r_h1.converged and r_h2.converged):
            traj.rejected += 1
            dt *= 0.25
            continue
        err = np.max(np.abs(y_h2 - y_full) / _error_scale(model, y_h2, rtol, atol))
        if err > 1.0:
            traj.rejected += 1
            dt *= max(0.2, 0.9 * err ** (-1.0 / (p + 1)))
            continue
        for tt, yy, bdf, rep in ((t + 0.5 * dt, y_h1, bdf_h1, r_h1), (t + dt, y_h2, bdf_h2, r_h2)):
            hist_t.append(tt)
            hist_y.append(model.full(yy))
            traj.times.append(tt)
            traj.states.append(yy)
            traj.photocurrent.append(model.photocurrent(yy, bdf))
            traj.reports.append(rep)
        hist_t, hist_y = hist_t[-3:], hist_y[-3:]
        t += dt
        y = y_h2
        accepted += 1
        # scaled time derivative, relative to the elapsed time
        dydt = bdf_h2.w0 * hist_y[-1] + bdf_h2.history_term(hist_y[-1].size)
        dydt = model.dofmap.restrict(dydt)
        phi = model.dofmap.block("phi")
        dydt[phi] = 0.0
        rate = float(np.max(np.abs(dydt) * t / model.variable_scales(y)))
        if stop_at_steady and rate < steady_tol:
            traj.steady = True
            break
        fac = 5.0 if err == 0 else min(5.0, max(0.2, 0.9 * err ** (-1.0 / (p + 1))))
        dt *= fac
    else:
        log.warning("march stopped after max_steps=%d at t=%.3e", max_steps, t)
    if output_times is not None:
        traj.output_times = np.asarray(output_times)
        traj.output_j = traj.sample(output_times)
    return traj


def steady_solve(model: MacroModel, y0: np.ndarray | None = None, tol: float = 1e-6,
                 max_iter: int = 60, pseudo_transient: bool = True,
                 eliminate_polaron: bool = True) -> tuple[np.ndarray, NewtonReport]:
    """Stationary solve; falls back to pseudo-transient continuation on failure."""
    y0 = model.initial_state() if y0 is None else y0
    y, rep = newton_solve(model, y0, tol=tol, max_iter=max_iter,
                          eliminate_polaron=eliminate_polaron)
    if rep.converged or not pseudo_transient:
        if not rep.converged:
            raise ConvergenceError(f"steady solve failed: {rep.message}", rep)
        return y, rep
    log.info("steady Newton failed (%s); pseudo-transient fallback", rep.message)
    y = model.enforce_dirichlet(y0)
    dt = 1e-12
    total = rep.iterations
    for _ in range(200):
        bdf = BdfContext((1.0 / dt, -1.0 / dt), [model.full(y)])
        yn, r = newton_solve(model, y, bdf, tol=tol, max_iter=20, eliminate_polaron=False)
        total += r.iterations
        if not r.converged:
            dt *= 0.25
            if dt < 1e-24:
                break
            continue
        y = yn
        dt *= 4.0
        if dt > 1e-6:
            ys, rs = newton_solve(model, y, tol=tol, max_iter=max_iter,
                                  eliminate_polaron=eliminate_polaron)
            total += rs.iterations
            if rs.converged:
                rs.iterations = total
                rs.message = "converged after pseudo-transient continuation"
                return ys, rs
    raise ConvergenceError("steady solve failed after pseudo-transient fallback", rep)
