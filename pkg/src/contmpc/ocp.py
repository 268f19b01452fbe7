"""Discrete-horizon optimal control problem: cost, optimality residual, Jacobians.

Every function here is vectorised over leading batch dimensions.  Shapes:
``U`` is ``(..., h*m)``, ``x`` is ``(..., n)`` and ``t`` is a scalar or an
array broadcastable to the batch shape.  Plant and cost callables receive
arrays with the same leading dimensions and must broadcast the same way.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, NamedTuple, Optional

import numpy as np

from .errors import AssumptionViolation, Divergence

Array = np.ndarray

FD_STEP = 1e-5


@dataclass(frozen=True)
class PlantModel:
    """Continuous-time plant ``xdot = f(x, u, t)`` with Jacobians.

    ``vjp_x(x, u, t, v)`` and ``vjp_u(x, u, t, v)`` may return ``fx^T v`` and
    ``fu^T v`` directly; the adjoint uses them instead of full matrices.
    """

    n: int
    m: int
    f: Callable[[Array, Array, Array], Array]
    fx: Callable[[Array, Array, Array], Array]
    fu: Callable[[Array, Array, Array], Array]
    vjp_x: Optional[Callable] = None
    vjp_u: Optional[Callable] = None


@dataclass(frozen=True)
class OcpSpec:
    """Horizon-``h`` problem with discrete dynamics ``fd`` and step ``dt``.

    ``hessian`` optionally supplies an exact ``dzeta/dU``; otherwise the
    Hessian is obtained by central differences of the adjoint gradient.
    """

    n: int
    m: int
    h: int
    dt: float
    fd: Callable
    fd_x: Callable
    fd_u: Callable
    stage: Callable
    stage_x: Callable
    stage_u: Callable
    terminal: Callable
    terminal_x: Callable
    hessian: Optional[Callable] = None
    fd_step: float = FD_STEP
    fd_x_vjp: Optional[Callable] = None
    fd_u_vjp: Optional[Callable] = None

    def __post_init__(self):
        if int(self.h) != self.h or self.h < 1:
            raise ValueError(f"horizon must be a positive integer, got {self.h}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")

    @property
    def hm(self) -> int:
        return self.h * self.m

    def first_input(self, U):
        """Projection onto the first input block, ``u0 = Pi0 U``."""
        return np.asarray(U)[..., : self.m]

    def blocks(self, U):
        U = np.asarray(U)
        return U.reshape(U.shape[:-1] + (self.h, self.m))


def euler_ocp(plant: PlantModel, h, dt, stage, stage_x, stage_u, terminal,
              terminal_x, hessian=None) -> OcpSpec:
    """Forward-Euler discretisation ``x + f(x, u, t) * dt`` of ``plant``."""
    n = plant.n

    def fd(x, u, t):
        return x + plant.f(x, u, t) * dt

    def fd_x(x, u, t):
        return np.eye(n) + plant.fx(x, u, t) * dt

    def fd_u(x, u, t):
        return plant.fu(x, u, t) * dt

    fd_x_vjp = fd_u_vjp = None
    if plant.vjp_x is not None:
        def fd_x_vjp(x, u, t, v):
            return v + plant.vjp_x(x, u, t, v) * dt
    if plant.vjp_u is not None:
        def fd_u_vjp(x, u, t, v):
            return plant.vjp_u(x, u, t, v) * dt

    return OcpSpec(n=plant.n, m=plant.m, h=h, dt=dt, fd=fd, fd_x=fd_x,
                   fd_u=fd_u, stage=stage, stage_x=stage_x, stage_u=stage_u,
                   terminal=terminal, terminal_x=terminal_x, hessian=hessian,
                   fd_x_vjp=fd_x_vjp, fd_u_vjp=fd_u_vjp)


def pi0(spec: OcpSpec) -> Array:
    """The ``m x hm`` matrix selecting the first input block."""
    P = np.zeros((spec.m, spec.hm))
    P[:, : spec.m] = np.eye(spec.m)
    return P


def _tmatvec(A, v):
    # A^T v over batch dims
    return (v[..., None, :] @ A)[..., 0, :]


def _broadcast(spec, U, x, t):
    U = np.asarray(U, dtype=float)
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    if U.shape[-1] != spec.hm:
        raise ValueError(f"U has trailing dimension {U.shape[-1]}, expected {spec.hm}")
    if x.shape[-1] != spec.n:
        raise ValueError(f"x has trailing dimension {x.shape[-1]}, expected {spec.n}")
    batch = np.broadcast_shapes(U.shape[:-1], x.shape[:-1], t.shape)
    U = np.broadcast_to(U, batch + (spec.hm,))
    x = np.broadcast_to(x, batch + (spec.n,))
    t = np.broadcast_to(t, batch)
    return U, x, t


def _states(spec, U, x, t):
    us = spec.blocks(U)
    xs = [x]
    for k in range(spec.h):
        xs.append(spec.fd(xs[-1], us[..., k, :], t + k * spec.dt))
    if not np.isfinite(np.sum(xs[-1])):
        # non-finite values propagate, so only locate the step on failure
        k = next(k for k in range(1, spec.h + 1) if not np.all(np.isfinite(xs[k])))
        raise Divergence(f"non-finite state at horizon step {k}", step=k)
    return xs, us


def rollout(spec: OcpSpec, U, x, t) -> Array:
    """States ``x^0 .. x^h`` along the horizon, shape ``(..., h+1, n)``."""
    U, x, t = _broadcast(spec, U, x, t)
    xs, _ = _states(spec, U, x, t)
    return np.stack(xs, axis=-2)


def cost_V(spec: OcpSpec, U, x, t) -> Array:
    U, x, t = _broadcast(spec, U, x, t)
    xs, us = _states(spec, U, x, t)
    V = spec.terminal(xs[spec.h], t + spec.h * spec.dt)
    for k in range(spec.h):
        V = V + spec.stage(xs[k], us[..., k, :], t + k * spec.dt)
    return V


def zeta(spec: OcpSpec, U, x, t) -> Array:
    """Gradient of ``cost_V`` with respect to ``U`` by the discrete adjoint."""
    return _zeta(spec, *_broadcast(spec, U, x, t))


def _zeta(spec, U, x, t):
    xs, us = _states(spec, U, x, t)
    h, dt = spec.h, spec.dt
    vjp_x = spec.fd_x_vjp or (lambda x, u, t, v: _tmatvec(spec.fd_x(x, u, t), v))
    vjp_u = spec.fd_u_vjp or (lambda x, u, t, v: _tmatvec(spec.fd_u(x, u, t), v))
    lam = spec.terminal_x(xs[h], t + h * dt)
    out = np.empty(U.shape[:-1] + (h, spec.m))
    for k in reversed(range(h)):
        tk = t + k * dt
        uk = us[..., k, :]
        out[..., k, :] = spec.stage_u(xs[k], uk, tk) + vjp_u(xs[k], uk, tk, lam)
        if k:
            lam = spec.stage_x(xs[k], uk, tk) + vjp_x(xs[k], uk, tk, lam)
    return out.reshape(U.shape)


class ZetaJet(NamedTuple):
    zeta: Array
    H: Array
    zeta_x: Array
    zeta_t: Array


@lru_cache(maxsize=None)
def _pattern(hm, n, wrt):
    """Signed unit perturbations for a stencil: centre row, then +/- rows per group."""
    sizes = {"U": hm, "x": n, "t": 1}
    S = 1 + 2 * sum(sizes[w] for w in wrt)
    E = {"U": np.zeros((S, hm)), "x": np.zeros((S, n)), "t": np.zeros(S)}
    rows = {}
    row = 1
    for w in wrt:
        d = sizes[w]
        idx = np.arange(d)
        if w == "t":
            E["t"][row], E["t"][row + 1] = 1.0, -1.0
        else:
            E[w][row + idx, idx] = 1.0
            E[w][row + d + idx, idx] = -1.0
        rows[w] = (slice(row, row + d), slice(row + d, row + 2 * d))
        row += 2 * d
    return E, rows


def _stencil(spec, U, x, t, step, wrt):
    """Evaluate zeta on the centre plus +/- perturbations of the ``wrt`` groups.

    Returns the centre value and a dict of Jacobians (output, input) by group.
    """
    E, rows = _pattern(spec.hm, spec.n, tuple(wrt))
    hU = step * (1.0 + np.abs(U))
    hx = step * (1.0 + np.abs(x))
    ht = step * (1.0 + np.abs(t))
    Z = _zeta(spec, U[..., None, :] + E["U"] * hU[..., None, :],
             x[..., None, :] + E["x"] * hx[..., None, :],
             t[..., None] + E["t"] * ht[..., None])
    centre = {"U": (U, hU), "x": (x, hx), "t": (t[..., None], ht[..., None])}
    jac = {}
    for w, (plus, minus) in rows.items():
        c, hc = centre[w]
        delta = (c + hc) - (c - hc)
        diff = Z[..., plus, :] - Z[..., minus, :]          # (..., d, hm)
        jac[w] = np.swapaxes(diff / delta[..., :, None], -1, -2)
    return Z[..., 0, :], jac


def _symmetrize(A):
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def check_positive_definite(H, what="H"):
    """Raise AssumptionViolation unless every matrix in the batch is PD."""
    lam = np.linalg.eigvalsh(H)[..., 0]
    if np.any(~(lam > 0)):
        worst = float(np.min(lam))
        where = np.unravel_index(int(np.argmin(lam)), lam.shape) if lam.ndim else None
        raise AssumptionViolation(
            f"{what} is not positive definite (min eigenvalue {worst:.6g})",
            min_eigenvalue=worst, point=where)
    return lam


def hessian_H(spec: OcpSpec, U, x, t, *, check_pd=False, step=None,
              symmetrize=True) -> Array:
    """``dzeta/dU``; central differences unless ``spec.hessian`` is given."""
    U, x, t = _broadcast(spec, U, x, t)
    if spec.hessian is not None:
        H = np.asarray(spec.hessian(U, x, t), dtype=float)
    else:
        _, jac = _stencil(spec, U, x, t, spec.fd_step if step is None else step, ("U",))
        H = jac["U"]
    if symmetrize:
        H = _symmetrize(H)
    if check_pd:
        check_positive_definite(H)
    return H


def zeta_x(spec: OcpSpec, U, x, t, *, step=None) -> Array:
    U, x, t = _broadcast(spec, U, x, t)
    _, jac = _stencil(spec, U, x, t, spec.fd_step if step is None else step, ("x",))
    return jac["x"]


def zeta_t(spec: OcpSpec, U, x, t, *, step=None) -> Array:
    U, x, t = _broadcast(spec, U, x, t)
    _, jac = _stencil(spec, U, x, t, spec.fd_step if step is None else step, ("t",))
    return jac["t"][..., 0]


def zeta_jet(spec: OcpSpec, U, x, t, *, step=None, with_t=True) -> ZetaJet:
    """Residual and its ``U``, ``x``, ``t`` derivatives from one batched call."""
    U, x, t = _broadcast(spec, U, x, t)
    step = spec.fd_step if step is None else step
    groups = ("x", "t") if spec.hessian is not None else ("U", "x", "t")
    if not with_t:
        groups = groups[:-1]
    z0, jac = _stencil(spec, U, x, t, step, groups)
    if spec.hessian is not None:
        H = np.asarray(spec.hessian(U, x, t), dtype=float)
    else:
        H = jac["U"]
    zt = jac["t"][..., 0] if with_t else None
    return ZetaJet(z0, _symmetrize(H), jac["x"], zt)
