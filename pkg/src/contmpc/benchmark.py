"""The four-state time-varying benchmark problem and its mesh presets.

Plant: ``f(x, u, t) = A(t) x + B u + r(x) + w(t)`` with

* ``r(x) = 0.2 * (0, fact(x1), 0, fact(x3))``, ``fact(a) = log(exp(a) + 1) - log 2``
* ``w(t) = 0.3 * (0, cs(t), 0, cs(t))``, ``cs(t) = cos(2t/pi)``, ``sn(t) = sin(2t/pi)``
* ``B`` with columns ``e1`` and ``e3``.

The delimiters of ``r`` are read as the 4-vector above.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.special import expit

from .continuation import AugmentedState, VirtualDynamics
from .mesh import Axis, MeshSpec
from .ocp import OcpSpec, PlantModel, euler_ocp

PRESET = "paper-sec4"

N_STATE = 4
N_INPUT = 2
HORIZON = 3
DT = 0.5
ETA_LINEAR = 0.2
ETA_CUBIC = 0.05

B = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0], [0.0, 0.0]])

_LOG2 = math.log(2.0)
_FREQ = 2.0 / math.pi


def f_act(a):
    return np.logaddexp(a, 0.0) - _LOG2


def f_act_prime(a):
    return expit(a)


def cs(t):
    return np.cos(np.multiply(t, _FREQ))


def sn(t):
    return np.sin(np.multiply(t, _FREQ))


def A_matrix(t):
    t = np.asarray(t, dtype=float)
    c, s = cs(t), sn(t)
    A = np.zeros(t.shape + (4, 4))
    A[..., 0, 0] = -0.5
    A[..., 1, 0] = 1.0
    A[..., 1, 1] = -1.0 + c / 2
    A[..., 2, 1] = 1.0
    A[..., 2, 2] = -1.0 + c / 2
    A[..., 3, 2] = 1.0
    A[..., 3, 3] = -1.0 + s / 2
    return A


# The plant terms are compiled gufuncs: the closed loop evaluates them tens of
# thousands of times on small batches, where per-call overhead dominates.

@numba.njit(cache=True)
def _softplus0(a):
    return max(a, 0.0) + math.log1p(math.exp(-abs(a))) - _LOG2


@numba.njit(cache=True)
def _logistic(a):
    if a >= 0:
        return 1.0 / (1.0 + math.exp(-a))
    e = math.exp(a)
    return e / (1.0 + e)


@numba.guvectorize(["void(float64[:], float64[:], float64, float64[:])"],
                   "(n),(m),()->(n)", nopython=True, cache=True)
def plant_f(x, u, t, out):
    c = math.cos(t * _FREQ)
    d = -1.0 + c / 2
    out[0] = -0.5 * x[0] + u[0]
    out[1] = x[0] + d * x[1] + 0.2 * _softplus0(x[0]) + 0.3 * c
    out[2] = x[1] + d * x[2] + u[1]
    out[3] = x[2] + (-1.0 + math.sin(t * _FREQ) / 2) * x[3] + 0.2 * _softplus0(x[2]) + 0.3 * c


@numba.guvectorize(["void(float64[:], float64[:], float64, float64[:, :])"],
                   "(n),(m),()->(n,n)", nopython=True, cache=True)
def plant_fx(x, u, t, out):
    c = math.cos(t * _FREQ)
    d = -1.0 + c / 2
    out[:, :] = 0.0
    out[0, 0] = -0.5
    out[1, 0] = 1.0 + 0.2 * _logistic(x[0])
    out[1, 1] = d
    out[2, 1] = 1.0
    out[2, 2] = d
    out[3, 2] = 1.0 + 0.2 * _logistic(x[2])
    out[3, 3] = -1.0 + math.sin(t * _FREQ) / 2


def plant_fu(x, u, t):
    return np.broadcast_to(B, np.broadcast_shapes(np.shape(x)[:-1], np.shape(t)) + (4, 2))


@numba.guvectorize(["void(float64[:], float64[:], float64, float64[:], float64[:])"],
                   "(n),(m),(),(n)->(n)", nopython=True, cache=True)
def plant_vjp_x(x, u, t, v, out):
    """``fx(x, u, t)^T v`` without forming the matrix."""
    d = -1.0 + math.cos(t * _FREQ) / 2
    out[0] = -0.5 * v[0] + (1.0 + 0.2 * _logistic(x[0])) * v[1]
    out[1] = d * v[1] + v[2]
    out[2] = d * v[2] + (1.0 + 0.2 * _logistic(x[2])) * v[3]
    out[3] = (-1.0 + math.sin(t * _FREQ) / 2) * v[3]


def plant_vjp_u(x, u, t, v):
    return v[..., 0::2]


def stage(x, u, t):
    return 0.5 * np.sum(x * x, axis=-1) + np.sum(u * u, axis=-1)


def stage_x(x, u, t):
    return x


def stage_u(x, u, t):
    return 2.0 * u


def terminal(x, t):
    return np.sum(x * x, axis=-1)


def terminal_x(x, t):
    return 2.0 * x


def eta(z, t):
    return -ETA_LINEAR * z - ETA_CUBIC * z ** 3


def eta_jacobian(z, t):
    z = np.asarray(z)
    d = -ETA_LINEAR - 3 * ETA_CUBIC * z ** 2
    return d[..., :, None] * np.eye(z.shape[-1])


@dataclass(frozen=True)
class BenchmarkProblem:
    plant: PlantModel
    spec: OcpSpec
    vd: VirtualDynamics
    initial: tuple = field(default_factory=tuple)


def initial_conditions():
    """The three closed-loop starting points, all at ``t = 0``."""
    return (
        AugmentedState(0.0, np.array([1.5, 1.5, -1.5, -1.5]), np.zeros(6)),
        AugmentedState(0.0, np.array([-1.5, -1.5, 1.5, 1.5]),
                       np.array([-0.5, -0.5, 0.0, 0.0, 0.0, 0.0])),
        AugmentedState(0.0, np.zeros(4), np.array([0.5, 0.5, 0.0, 0.0, 0.0, 0.0])),
    )


def build_benchmark() -> BenchmarkProblem:
    plant = PlantModel(n=N_STATE, m=N_INPUT, f=plant_f, fx=plant_fx, fu=plant_fu,
                       vjp_x=plant_vjp_x, vjp_u=plant_vjp_u)
    spec = euler_ocp(plant, HORIZON, DT, stage, stage_x, stage_u, terminal, terminal_x)
    vd = VirtualDynamics(eta=eta, eta_jacobian=eta_jacobian, fixes_origin=True)
    return BenchmarkProblem(plant=plant, spec=spec, vd=vd, initial=initial_conditions())


# Mesh presets.  "paper" is the full grid; "desk" keeps every stride-th node.

def mesh_p_opt(scale="paper") -> MeshSpec:
    mesh = MeshSpec([Axis(f"x{i + 1}", -2.0, 2.0, 21) for i in range(4)]
                    + [Axis("t", 0.0, 3.9, 40)])
    if scale == "desk":
        mesh = mesh.subsample(5)
    return mesh


def mesh_gk(scale="paper") -> MeshSpec:
    mesh = MeshSpec([Axis(f"x{i + 1}", -1.6, 1.6, 5) for i in range(4)]
                    + [Axis("t", 0.5, 3.5, 4)]
                    + [Axis(f"U{i + 1}", -0.6, 0.6, 7) for i in range(6)])
    if scale == "desk":
        mesh = mesh.subsample({"x": 2, "t": 1, "U": 3})
    return mesh


def mesh_q(scale="paper") -> MeshSpec:
    """Residual box for the virtual-dynamics inequality (not gridded in the source)."""
    count = 9 if scale == "paper" else 5
    return MeshSpec([Axis(f"z{i + 1}", -5.0, 5.0, count) for i in range(6)]
                    + [Axis("t", 0.0, 3.9, 40 if scale == "paper" else 4)])


MESH_PRESETS = {"P-opt": mesh_p_opt, "GK": mesh_gk, "P-full": mesh_gk,
                "assumption1": mesh_gk, "Q": mesh_q}
