"""Continuation-method MPC: ``Udot = H^-1 b`` and the closed-loop integrator."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import AssumptionViolation, Divergence
from .ocp import OcpSpec, PlantModel, cost_V, zeta_jet

DEFAULT_TAU = 1e-3
DEFAULT_T_END = 5.0


@dataclass(frozen=True)
class VirtualDynamics:
    """Designed residual dynamics ``zdot = eta(z, t)``."""

    eta: Callable
    eta_jacobian: Callable
    fixes_origin: bool = False


def linear_eta(c=1.0) -> VirtualDynamics:
    """``eta(z, t) = -c z``."""
    def eta(z, t):
        return -c * np.asarray(z)

    def jac(z, t):
        z = np.asarray(z)
        return np.broadcast_to(-c * np.eye(z.shape[-1]), z.shape + (z.shape[-1],))

    return VirtualDynamics(eta, jac, fixes_origin=True)


@dataclass
class AugmentedState:
    t: float
    x: np.ndarray
    U: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.U = np.asarray(self.U, dtype=float)

    @property
    def s(self):
        return np.concatenate([self.x, self.U], axis=-1)

    @classmethod
    def from_vector(cls, s, n, t=0.0):
        s = np.asarray(s, dtype=float)
        return cls(t, s[..., :n], s[..., n:])


@dataclass
class TrajectoryRecord:
    """Samples of a closed-loop run at ``t0 + k * step``.

    ``U`` holds the full design vector and is not written to CSV.
    """

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    zeta_norm: np.ndarray
    cost: np.ndarray
    step: float
    U: Optional[np.ndarray] = None
    newton_iterations: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.t)

    @property
    def s(self):
        return np.concatenate([self.x, self.U], axis=-1)

    def header(self):
        n, m = self.x.shape[1], self.u.shape[1]
        return (["t"] + [f"x_{i + 1}" for i in range(n)] + [f"u_{i + 1}" for i in range(m)]
                + ["zeta_norm", "cost_V"])

    def to_csv(self, path):
        rows = np.column_stack([self.t, self.x, self.u, self.zeta_norm, self.cost])
        np.savetxt(path, rows, fmt="%.17g", delimiter=",",
                   header=",".join(self.header()), comments="")

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            header = next(csv.reader(fh))
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        n = sum(h.startswith("x_") for h in header)
        m = sum(h.startswith("u_") for h in header)
        t = data[:, 0]
        step = float(t[1] - t[0]) if len(t) > 1 else 0.0
        return cls(t=t, x=data[:, 1:1 + n], u=data[:, 1 + n:1 + n + m],
                   zeta_norm=data[:, 1 + n + m], cost=data[:, 2 + n + m], step=step)


def spd_solve(H, b, time=None):
    """Solve ``H y = b`` through a Cholesky factor of the SPD matrix ``H``.

    ``b`` is a vector per matrix, or a matrix of right-hand sides when it has
    as many dimensions as ``H``.
    """
    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        lam = float(np.min(np.linalg.eigvalsh(H)[..., 0]))
        raise AssumptionViolation(
            f"H is not positive definite (min eigenvalue {lam:.6g})"
            + (f" at t={time:.6g}" if time is not None else ""),
            min_eigenvalue=lam, time=time) from None
    vec = np.ndim(b) < np.ndim(H)
    y = np.linalg.solve(L, b[..., None] if vec else b)
    y = np.linalg.solve(np.swapaxes(L, -1, -2), y)
    return y[..., 0] if vec else y


def b_vector(plant: PlantModel, spec: OcpSpec, vd: VirtualDynamics, U, x, t, jet=None):
    """``eta(zeta) - zeta_x f(x, Pi0 U, t) - zeta_t``."""
    if jet is None:
        jet = zeta_jet(spec, U, x, t)
    x = np.asarray(x, dtype=float)
    f = plant.f(x, spec.first_input(U), t)
    return vd.eta(jet.zeta, t) - (jet.zeta_x @ f[..., None])[..., 0] - jet.zeta_t


def u_dot(plant, spec, vd, U, x, t, jet=None):
    if jet is None:
        jet = zeta_jet(spec, U, x, t)
    return spd_solve(jet.H, b_vector(plant, spec, vd, U, x, t, jet))


def _phi(plant, spec, vd, s, t):
    """Closed-loop vector field on stacked states; also returns zeta."""
    n = spec.n
    x, U = s[..., :n], s[..., n:]
    jet = zeta_jet(spec, U, x, t)
    u = spec.first_input(U)
    f = plant.f(x, u, t)
    b = vd.eta(jet.zeta, t) - (jet.zeta_x @ f[..., None])[..., 0] - jet.zeta_t
    Udot = spd_solve(jet.H, b, time=float(np.max(t)))
    return np.concatenate([f, Udot], axis=-1), jet.zeta


def closed_loop_rhs(plant, spec, vd, s, t=None):
    """``phi(s, t) = [f(x, Pi0 U, t); H^-1 b]``.

    ``s`` is an AugmentedState, or a stacked ``[x; U]`` array with ``t``.
    """
    if isinstance(s, AugmentedState):
        t = s.t
        s = s.s
    return _phi(plant, spec, vd, np.asarray(s, dtype=float), t)[0]


def rk4(rhs, y0, t0, tau, n_steps, observe=None):
    """Classical fixed-step RK4.

    ``rhs(y, t)`` returns ``(ydot, info)``; ``observe(k, t, y, info)`` sees
    every node, with ``info`` from the first stage evaluation.
    """
    y = np.array(y0, dtype=float)
    for k in range(n_steps):
        t = t0 + k * tau
        k1, info = rhs(y, t)
        if observe is not None:
            observe(k, t, y, info)
        k2, _ = rhs(y + 0.5 * tau * k1, t + 0.5 * tau)
        k3, _ = rhs(y + 0.5 * tau * k2, t + 0.5 * tau)
        k4, _ = rhs(y + tau * k3, t + tau)
        y = y + (tau / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise Divergence(f"non-finite state at t={t + tau:.6g}", step=k + 1, time=t + tau)
    if observe is not None:
        t = t0 + n_steps * tau
        _, info = rhs(y, t)
        observe(n_steps, t, y, info)
    return y


def n_steps_for(t0, t_end, tau):
    if not tau > 0:
        raise ValueError("step must be positive")
    if not t_end > t0:
        raise ValueError("t_end must exceed the initial time")
    return int(round((t_end - t0) / tau))


def _records(spec, ts, S, Z, tau):
    n, m = spec.n, spec.m
    x, U = S[..., :n], S[..., n:]
    V = cost_V(spec, U, x, ts[:, None])
    zn = np.linalg.norm(Z, axis=-1)
    return [TrajectoryRecord(t=ts.copy(), x=x[:, i].copy(), u=U[:, i, :m].copy(),
                             zeta_norm=zn[:, i].copy(), cost=V[:, i].copy(), step=tau,
                             U=U[:, i].copy())
            for i in range(S.shape[1])]


def simulate_batch(plant, spec, vd, x0, U0, t0=0.0, t_end=DEFAULT_T_END, tau=DEFAULT_TAU):
    """Integrate several closed loops side by side; one record per row of ``x0``."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    U0 = np.atleast_2d(np.asarray(U0, dtype=float))
    n_steps = n_steps_for(t0, t_end, tau)
    if x0.shape[0] != U0.shape[0]:
        raise ValueError("x0 and U0 must have the same number of rows")
    s0 = np.concatenate([x0, U0], axis=-1)
    S = np.empty((n_steps + 1,) + s0.shape)
    Z = np.empty((n_steps + 1, s0.shape[0], spec.hm))

    def observe(k, t, y, z):
        S[k] = y
        Z[k] = z

    def rhs(y, t):
        return _phi(plant, spec, vd, y, t)

    rk4(rhs, s0, t0, tau, n_steps, observe)
    ts = t0 + tau * np.arange(n_steps + 1)
    return _records(spec, ts, S, Z, tau)


def simulate(plant, spec, vd, s0: AugmentedState, t_end=DEFAULT_T_END, tau=DEFAULT_TAU):
    return simulate_batch(plant, spec, vd, s0.x[None], s0.U[None], s0.t, t_end, tau)[0]
