"""Exact optimum ``U*(x, t)`` by damped Newton on ``zeta = 0``, its sensitivity,
and the optimally controlled closed loop."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .continuation import (DEFAULT_T_END, DEFAULT_TAU, TrajectoryRecord, n_steps_for, rk4,
                           spd_solve)
from .errors import AssumptionViolation, NoConvergence
from .ocp import _broadcast, check_positive_definite, cost_V, hessian_H, zeta, zeta_jet

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 50
MAX_HALVINGS = 40


class NewtonResult(NamedTuple):
    U: np.ndarray
    residual: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray


def newton(spec, x, t, U0=None, tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER,
           raise_on_indefinite=True) -> NewtonResult:
    """Vectorised damped Newton; never raises on non-convergence.

    Each point backtracks independently, halving the step until the
    residual norm decreases.  A point whose line search fails is frozen.
    With ``raise_on_indefinite=False`` points meeting a non-PD Hessian are
    frozen and reported as not converged instead of raising.
    """
    U0 = np.zeros(np.shape(x)[:-1] + (spec.hm,)) if U0 is None else U0
    U, x, t = _broadcast(spec, U0, x, t)
    batch = U.shape[:-1]
    U = U.reshape(-1, spec.hm).copy()
    x = x.reshape(-1, spec.n)
    t = t.reshape(-1)
    z = zeta(spec, U, x, t)
    res = np.linalg.norm(z, axis=-1)
    iters = np.zeros(len(U), dtype=int)
    active = res > tol
    failed = np.zeros(len(U), dtype=bool)
    for _ in range(max_iter):
        a = np.flatnonzero(active)
        if a.size == 0:
            break
        H = hessian_H(spec, U[a], x[a], t[a])
        lam = np.linalg.eigvalsh(H)[:, 0]
        bad = ~(lam > 0)
        if np.any(bad):
            i = a[int(np.argmin(lam))]
            if raise_on_indefinite:
                raise AssumptionViolation(
                    f"H is not positive definite (min eigenvalue {lam.min():.6g}) "
                    f"at x={x[i]}, t={t[i]}", min_eigenvalue=float(lam.min()),
                    point={"x": x[i], "t": float(t[i]), "U": U[i]})
            failed[a[bad]] = True
            active[a[bad]] = False
            a, H = a[~bad], H[~bad]
            if a.size == 0:
                break
        step = spd_solve(H, z[a])
        iters[a] += 1
        alpha = np.ones(a.size)
        pending = np.ones(a.size, dtype=bool)
        for _ in range(MAX_HALVINGS):
            p = np.flatnonzero(pending)
            if p.size == 0:
                break
            idx = a[p]
            trial = U[idx] - alpha[p, None] * step[p]
            zt = zeta(spec, trial, x[idx], t[idx])
            rt = np.linalg.norm(zt, axis=-1)
            ok = rt < res[idx]
            acc = idx[ok]
            U[acc], z[acc], res[acc] = trial[ok], zt[ok], rt[ok]
            pending[p[ok]] = False
            alpha[p[~ok]] *= 0.5
        active[a[pending]] = False
        active &= res > tol
    conv = (res <= tol) & ~failed
    return NewtonResult(U.reshape(batch + (spec.hm,)), res.reshape(batch),
                        iters.reshape(batch), conv.reshape(batch))


def solve_ustar(spec, x, t, U_init=None, tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER):
    """Optimal design; the Hessian is also checked at the returned point, so a
    degenerate problem whose residual vanishes identically is rejected."""
    r = newton(spec, x, t, U_init, tol, max_iter)
    if not np.all(r.converged):
        worst = float(np.max(r.residual))
        raise NoConvergence(f"Newton stopped with residual {worst:.3e} after {max_iter} iterations",
                            residual=worst)
    check_positive_definite(hessian_H(spec, r.U, x, t))
    return r.U


def ustar_sensitivity(spec, x, t, U_star=None):
    """``dU*/dx = -H^-1 zeta_x`` at the optimum, shape ``(..., hm, n)``."""
    if U_star is None:
        U_star = solve_ustar(spec, x, t)
    jet = zeta_jet(spec, U_star, x, t, with_t=False)
    return -spd_solve(jet.H, jet.zeta_x)


def simulate_optimal_batch(plant, spec, x0, t0=0.0, t_end=DEFAULT_T_END, tau=DEFAULT_TAU):
    """RK4 on ``xdot = f(x, Pi0 U*(x, t), t)``, warm-starting every solve."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    n_steps = n_steps_for(t0, t_end, tau)
    warm = {"U": np.zeros((x0.shape[0], spec.hm))}
    X = np.empty((n_steps + 1,) + x0.shape)
    US = np.empty((n_steps + 1, x0.shape[0], spec.hm))
    IT = np.empty((n_steps + 1, x0.shape[0]), dtype=int)

    def rhs(x, t):
        r = newton(spec, x, t, warm["U"])
        if not np.all(r.converged):
            raise NoConvergence(f"Newton failed at t={t:.6g}", residual=float(r.residual.max()),
                                time=t)
        warm["U"] = r.U
        return plant.f(x, spec.first_input(r.U), t), r

    def observe(k, t, x, r):
        X[k], US[k], IT[k] = x, r.U, r.iterations

    rk4(rhs, x0, t0, tau, n_steps, observe)
    ts = t0 + tau * np.arange(n_steps + 1)
    zn = np.linalg.norm(zeta(spec, US, X, ts[:, None]), axis=-1)
    V = cost_V(spec, US, X, ts[:, None])
    recs = []
    for i in range(x0.shape[0]):
        recs.append(TrajectoryRecord(
            t=ts.copy(), x=X[:, i].copy(), u=US[:, i, :spec.m].copy(),
            zeta_norm=zn[:, i].copy(), cost=V[:, i].copy(), step=tau, U=US[:, i].copy(),
            newton_iterations=IT[:, i].copy()))
    return recs


def simulate_optimal(plant, spec, x0, t0=0.0, t_end=DEFAULT_T_END, tau=DEFAULT_TAU):
    return simulate_optimal_batch(plant, spec, np.asarray(x0)[None], t0, t_end, tau)[0]
