"""Hierarchical contraction metric, the operator ``L[M, phi, s, gamma]`` and
mesh certificates for the closed loop of the continuation method.

Notation: ``<S> = S + S^T``.  ``L[M, phi, s, gamma] = L_phi M + dM/dt +
<M dphi/ds> + gamma M`` and a certificate holds when its largest eigenvalue
is non-positive.
"""
from __future__ import annotations

import time as _time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .continuation import closed_loop_rhs, simulate_batch, spd_solve
from .errors import AssumptionViolation, MetricViolation, NoConvergence
from .ocp import FD_STEP, _symmetrize, pi0, zeta_jet
from .optimal import newton, solve_ustar, ustar_sensitivity
from .parallel import default_workers, map_chunks

ZERO_TOL = 1e-9


@dataclass(frozen=True)
class MetricConfig:
    """Metric ``M = blockdiag(P, 0) + kappa (dzeta/ds)^T Q(zeta, t) dzeta/ds``.

    ``P(x, t)`` and ``Q(z, t)`` are batched callables returning symmetric
    matrices.  ``constant`` declares both independent of their arguments,
    which removes the finite-difference Lie and time derivative terms.
    """

    P: Callable
    Q: Callable
    kappa: float = 1.0
    gamma: float = 0.1
    beta_x: float = 0.1
    beta_z: float = 0.4
    beta_p: float = 0.032
    constant: bool = False
    eps_P: float = 0.0
    eps_Q: float = 0.0

    @classmethod
    def from_matrices(cls, P, Q, **kw):
        P = np.asarray(P, dtype=float)
        Q = np.asarray(Q, dtype=float)

        def Pfun(x, t):
            return np.broadcast_to(P, np.broadcast_shapes(np.shape(x)[:-1], np.shape(t)) + P.shape)

        def Qfun(z, t):
            return np.broadcast_to(Q, np.broadcast_shapes(np.shape(z)[:-1], np.shape(t)) + Q.shape)

        kw.setdefault("eps_P", float(np.linalg.eigvalsh(P)[0]))
        kw.setdefault("eps_Q", float(np.linalg.eigvalsh(Q)[0]))
        return cls(Pfun, Qfun, constant=True, **kw)

    @classmethod
    def identity(cls, n, hm, **kw):
        return cls.from_matrices(np.eye(n), np.eye(hm), **kw)

    def require_rate_ordering(self):
        if not (self.beta_x > self.beta_p > 0 and self.beta_z > 0):
            raise ValueError("rates must satisfy beta_x > beta_p > 0 and beta_z > 0")


# ---------------------------------------------------------------------------
# operators


def _lambda_max(A):
    return np.linalg.eigvalsh(_symmetrize(A))[..., -1]


def rate_operator(Pfun, y, t, v, J, rate, constant=False, step=FD_STEP):
    """``L[P, g, y, rate]`` for a field with value ``v = g(y, t)`` and Jacobian ``J``.

    The Lie and time derivatives of ``P`` are central differences along ``v``
    and ``t``; both vanish when ``constant`` is set.
    """
    y = np.asarray(y, dtype=float)
    t = np.asarray(t, dtype=float)
    P0 = Pfun(y, t)
    PJ = P0 @ J
    L = PJ + np.swapaxes(PJ, -1, -2) + rate * P0
    if not constant:
        nv = np.linalg.norm(v, axis=-1)
        h = step * (1.0 + np.linalg.norm(y, axis=-1)) / np.where(nv > 0, nv, 1.0)
        hv = h[..., None] * v
        L = L + (Pfun(y + hv, t) - Pfun(y - hv, t)) / (2 * h)[..., None, None]
        ht = step * (1.0 + np.abs(t))
        L = L + (Pfun(y, t + ht) - Pfun(y, t - ht)) / (2 * ht)[..., None, None]
    return _symmetrize(L)


def _fd_jacobian(fun, y, t, step=FD_STEP):
    """Central-difference Jacobian of ``fun(y, t)`` in ``y``, shape ``(..., out, d)``."""
    y = np.asarray(y, dtype=float)
    d = y.shape[-1]
    h = step * (1.0 + np.abs(y))
    E = np.concatenate([np.eye(d), -np.eye(d)])
    Y = y[..., None, :] + E * np.concatenate([h, h], axis=-1)[..., :, None]
    F = fun(Y, np.asarray(t, dtype=float)[..., None])
    delta = (y + h) - (y - h)
    return np.swapaxes((F[..., :d, :] - F[..., d:, :]) / delta[..., :, None], -1, -2)


def L_operator(Mfun, phi, s, t, gamma, constant=False, step=FD_STEP):
    """General ``L[M, phi, s, gamma]`` with every derivative by central differences.

    ``Mfun(s, t)`` and ``phi(s, t)`` must accept batched ``s``.
    """
    s = np.asarray(s, dtype=float)
    v = phi(s, t)
    J = _fd_jacobian(phi, s, t, step)
    return rate_operator(Mfun, s, t, v, J, gamma, constant=constant, step=step)


def zeta_s(jet):
    """``dzeta/ds = [dzeta/dx, H]``."""
    return np.concatenate([jet.zeta_x, jet.H], axis=-1)


def metric_M(cfg: MetricConfig, spec, U, x, t, jet=None):
    if jet is None:
        jet = zeta_jet(spec, U, x, t, with_t=False)
    n = spec.n
    Zs = zeta_s(jet)
    Q = cfg.Q(jet.zeta, t)
    M = cfg.kappa * (np.swapaxes(Zs, -1, -2) @ Q @ Zs)
    M[..., :n, :n] += cfg.P(np.asarray(x, dtype=float), t)
    return _symmetrize(M)


def K_matrix(spec, U, x, t, U_star=None, jet=None):
    """``-H(U)^-1 zeta_x(U) - dU*/dx``: first term at ``U``, second at the optimum."""
    if jet is None:
        jet = zeta_jet(spec, U, x, t, with_t=False)
    sens = ustar_sensitivity(spec, x, t, U_star)
    return -spd_solve(jet.H, jet.zeta_x) - sens


def P_xU_matrix(cfg: MetricConfig, plant, spec, x, u_r, t, U_star=None):
    """``P(x, t) fu(x, Pi0 U*(x, t) + u_r, t) Pi0``, shape ``(..., n, hm)``."""
    if U_star is None:
        U_star = solve_ustar(spec, x, t)
    u = spec.first_input(U_star) + u_r
    return cfg.P(np.asarray(x, dtype=float), t) @ plant.fu(x, u, t) @ pi0(spec)


def _PxU_K(cfg, plant, spec, x, u, t, K):
    """``P_xU K`` using ``P fu Pi0 K = P fu K[:m]``."""
    return cfg.P(x, t) @ plant.fu(x, u, t) @ K[..., : spec.m, :]


def _fr_x(plant, spec, x, u, t, sens):
    """``dfr/dx = fx + fu Pi0 dU*/dx`` at ``u = Pi0 U* + u_r`` (chain rule)."""
    return plant.fx(x, u, t) + plant.fu(x, u, t) @ sens[..., : spec.m, :]


# ---------------------------------------------------------------------------
# certificates


@dataclass
class CertificateReport:
    """Worst case of one inequality over a mesh.

    ``worst_margin`` is the largest eigenvalue of the certified matrix (for
    ``assumption1`` it is ``-min eig H``); the certificate passes when it is
    at most ``ZERO_TOL`` (strictly negative for ``assumption1``).
    """

    inequality: str
    passed: bool
    worst_margin: float
    argmax_point: dict
    points_checked: int
    wall_time_s: float = 0.0
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        return {"inequality": self.inequality, "pass": bool(self.passed),
                "worst_margin": float(self.worst_margin),
                "argmax_point": self.argmax_point,
                "points_checked": int(self.points_checked),
                "wall_time_s": float(self.wall_time_s), "extras": self.extras}


CERTIFICATE_SCHEMA = {
    "type": "object",
    "required": ["inequality", "pass", "worst_margin", "argmax_point", "points_checked",
                 "wall_time_s"],
    "properties": {
        "inequality": {"type": "string"},
        "pass": {"type": "boolean"},
        "worst_margin": {"type": "number"},
        "argmax_point": {
            "type": "object",
            "required": ["x", "t"],
            "properties": {
                "x": {"type": "array", "items": {"type": "number"}},
                "t": {"type": "number"},
                "U": {"type": "array", "items": {"type": "number"}},
                "z": {"type": "array", "items": {"type": "number"}},
                "u_r": {"type": "array", "items": {"type": "number"}},
            },
        },
        "points_checked": {"type": "integer", "minimum": 0},
        "wall_time_s": {"type": "number", "minimum": 0},
        "extras": {"type": "object"},
    },
}


class _Worst:
    """Running max of a per-point quantity together with its argmax point."""

    def __init__(self):
        self.value = -np.inf
        self.point = None

    def update(self, values, points):
        if values.size == 0:
            return
        i = int(np.argmax(values))
        if values[i] > self.value or self.point is None:
            self.value = float(values[i])
            self.point = {k: v[i] for k, v in points.items()}

    def merge(self, other):
        if other.point is not None and (other.value > self.value or self.point is None):
            self.value, self.point = other.value, other.point
        return self


def _point_dict(point):
    out = {}
    for k, v in (point or {}).items():
        out[k] = float(v) if np.ndim(v) == 0 else [float(a) for a in np.ravel(v)]
    out.setdefault("x", [])
    out.setdefault("t", float("nan"))
    return out


def _report(name, worst: _Worst, count, t0, strict=False, extras=None):
    passed = worst.value < 0 if strict else worst.value <= ZERO_TOL
    return CertificateReport(name, bool(passed), worst.value, _point_dict(worst.point),
                             int(count), _time.perf_counter() - t0, extras or {})


def _axes(mesh, group, required=True):
    names = mesh.names_in(group)
    if required and not names:
        raise ValueError(f"mesh has no '{group}' axes")
    return names


def check_ineq_Q(cfg: MetricConfig, vd, mesh, rate=None, workers=None):
    """``L[Q, eta, z, beta_z] <= 0`` over a mesh of ``z`` and ``t``."""
    t0 = _time.perf_counter()
    rate = cfg.beta_z if rate is None else rate
    zn, tn = _axes(mesh, "z"), _axes(mesh, "t")

    def run(chunk):
        z, t = chunk[:, :-1], chunk[:, -1]
        L = rate_operator(cfg.Q, z, t, vd.eta(z, t), vd.eta_jacobian(z, t), rate, cfg.constant)
        w = _Worst()
        w.update(_lambda_max(L), {"z": z, "t": t})
        return w, len(z)

    parts = map_chunks(run, mesh.chunks(zn + tn, 20000), workers)
    worst = _Worst()
    for w, _ in parts:
        worst.merge(w)
    return _report("Q", worst, sum(c for _, c in parts), t0)


def _optimum(spec, x, t, U0=None):
    """Newton plus sensitivity; points without a positive definite minimiser are masked."""
    r = newton(spec, x, t, U0, raise_on_indefinite=False)
    conv = r.converged.copy()
    S = np.full(x.shape[:-1] + (spec.hm, spec.n), np.nan)
    if conv.any():
        tt = np.broadcast_to(t, x.shape[:-1])
        try:
            S[conv] = ustar_sensitivity(spec, x[conv], tt[conv], r.U[conv])
        except AssumptionViolation:
            # a stationary point with indefinite H is not a minimiser
            H = zeta_jet(spec, r.U[conv], x[conv], tt[conv], with_t=False).H
            idx = np.flatnonzero(conv)
            conv[idx[np.linalg.eigvalsh(H)[:, 0] <= 0]] = False
            if conv.any():
                S[conv] = ustar_sensitivity(spec, x[conv], tt[conv], r.U[conv])
    return r.U, S, conv


def _ustar_chain(spec, x, ts):
    """Optimal designs and sensitivities for points ``x`` at each time in ``ts``.

    Newton is warm-started from the previous time slice.  Returns arrays of
    shape ``(len(ts), N, ...)`` and a convergence mask.
    """
    U = np.zeros(x.shape[:-1] + (spec.hm,))
    Us, sens, ok = [], [], []
    for t in ts:
        Ut, S, conv = _optimum(spec, x, t, U)
        U = np.where(conv[:, None], Ut, U)
        Us.append(Ut)
        sens.append(S)
        ok.append(conv)
    return np.array(Us), np.array(sens), np.array(ok)


def check_ineq_P_opt(cfg: MetricConfig, plant, spec, mesh, rate=None, workers=None,
                     chunk=20000):
    """``L[P, f_r, x, beta_x + beta_p] <= 0`` over ``x``, ``t`` and optional ``u_r`` axes.

    ``dfr/dx = fx + fu Pi0 dU*/dx``.  Points where Newton fails count as
    violations (margin ``+inf``).
    """
    t0 = _time.perf_counter()
    rate = cfg.beta_x + cfg.beta_p if rate is None else rate
    xn, tn, urn = _axes(mesh, "x"), _axes(mesh, "t"), _axes(mesh, "ur", required=False)
    if len(tn) != 1:
        raise ValueError("mesh needs exactly one t axis")
    ts = mesh.values(tn[0])
    outer = xn + urn

    def run(block):
        x, ur = block[:, : spec.n], block[:, spec.n:]
        if ur.shape[1] == 0:
            ur = np.zeros(x.shape[:-1] + (spec.m,))
        Us, sens, ok = _ustar_chain(spec, x, ts)
        w, failures = _Worst(), []
        for k, t in enumerate(ts):
            u = spec.first_input(Us[k]) + ur
            good = ok[k]
            margin = np.full(len(x), np.inf)
            if good.any():
                J = _fr_x(plant, spec, x[good], u[good], t, sens[k][good])
                L = rate_operator(cfg.P, x[good], t, plant.f(x[good], u[good], t), J, rate,
                                  cfg.constant)
                margin[good] = _lambda_max(L)
            failures += [{"x": x[i].tolist(), "t": float(t)} for i in np.flatnonzero(~good)]
            w.update(margin, {"x": x, "t": np.full(len(x), t), "u_r": ur})
        return w, len(x) * len(ts), failures

    parts = map_chunks(run, mesh.chunks(outer, chunk), workers)
    worst, failures = _Worst(), []
    for w, _, f in parts:
        worst.merge(w)
        failures += f
    return _report("P-opt", worst, sum(p[1] for p in parts), t0,
                   extras={"rate": rate, "newton_failures": failures[:20],
                           "n_newton_failures": len(failures)})


def _uxt_sweep(cfg, plant, spec, mesh, want, workers=None, target=60000):
    """Evaluate quantities on a ``(U, x, t)`` mesh.

    ``want`` is a subset of {"H", "GK", "P-full", "zeta_x", "fu"}.  The
    optimum and its sensitivity are computed once per ``(x, t)`` node and
    shared by every ``U`` node.  Returns a dict of ``_Worst`` trackers.
    """
    xn, tn, Un = _axes(mesh, "x"), _axes(mesh, "t"), _axes(mesh, "U")
    Ugrid = mesh.product(Un)
    need_opt = bool({"GK", "P-full"} & set(want))
    per = max(1, target // len(Ugrid))

    def run(xt):
        x_nodes, t_nodes = xt[:, :-1], xt[:, -1]
        res = {k: _Worst() for k in ("H", "GK", "GK_norm", "GK_sym_norm", "P-full", "zeta_x",
                                     "fu")}
        failures = []
        if need_opt:
            _, sens, conv = _optimum(spec, x_nodes, t_nodes)
            failures = [{"x": x_nodes[i].tolist(), "t": float(t_nodes[i])}
                        for i in np.flatnonzero(~conv)]
        # broadcast to (nodes, U nodes)
        X = np.broadcast_to(x_nodes[:, None, :], (len(xt), len(Ugrid), spec.n))
        T = np.broadcast_to(t_nodes[:, None], (len(xt), len(Ugrid)))
        U = np.broadcast_to(Ugrid[None], (len(xt), len(Ugrid), spec.hm))
        pts = {"x": X.reshape(-1, spec.n), "t": T.reshape(-1), "U": U.reshape(-1, spec.hm)}
        jet = zeta_jet(spec, U, X, T, with_t=False)
        u = spec.first_input(U)
        if "H" in want:
            res["H"].update(-np.linalg.eigvalsh(jet.H)[..., 0].ravel(), pts)
        if "zeta_x" in want:
            res["zeta_x"].update(np.linalg.norm(jet.zeta_x, 2, axis=(-2, -1)).ravel(), pts)
        if "fu" in want:
            res["fu"].update(np.linalg.norm(plant.fu(X, u, T), 2, axis=(-2, -1)).ravel(), pts)
        if need_opt:
            S = sens[:, None]
            K = -spd_solve(jet.H, jet.zeta_x) - S
            G = _PxU_K(cfg, plant, spec, X, u, T, K)
            bad = np.isnan(G).any(axis=(-2, -1))
            G = np.where(bad[..., None, None], 0.0, G)
            sym = G + np.swapaxes(G, -1, -2)
            P = cfg.P(X, T)
            if "GK" in want:
                m = _lambda_max(sym - cfg.beta_p * P)
                res["GK"].update(np.where(bad, np.inf, m).ravel(), pts)
                nrm = np.linalg.norm(G, 2, axis=(-2, -1))
                res["GK_norm"].update(np.where(bad, np.inf, nrm).ravel(), pts)
                nrm = np.abs(np.linalg.eigvalsh(sym)).max(axis=-1)
                res["GK_sym_norm"].update(np.where(bad, np.inf, nrm).ravel(), pts)
            if "P-full" in want:
                J = _fr_x(plant, spec, X, u, T, np.where(np.isnan(S), 0.0, S))
                L = rate_operator(cfg.P, X, T, plant.f(X, u, T), J, cfg.beta_x, cfg.constant)
                m = _lambda_max(L + sym)
                res["P-full"].update(np.where(bad, np.inf, m).ravel(), pts)
        return res, len(xt) * len(Ugrid), failures

    parts = map_chunks(run, mesh.chunks(xn + tn, per), workers)
    total = {k: _Worst() for k in parts[0][0]} if parts else {}
    failures = []
    for res, _, f in parts:
        for k, w in res.items():
            total[k].merge(w)
        failures += f
    return total, sum(p[1] for p in parts), failures


def check_ineq_GK(cfg: MetricConfig, plant, spec, mesh, workers=None):
    """``<P_xU K> - beta_p P <= 0`` over ``(U, x, t)``.

    Also reports the largest spectral norms of ``P_xU K`` and of its
    symmetric part; ``2 max ||P_xU K|| <= beta_p p_min`` suffices for a pass.
    """
    t0 = _time.perf_counter()
    res, count, failures = _uxt_sweep(cfg, plant, spec, mesh, ("GK",), workers)
    return _report("GK", res["GK"], count, t0, extras={
        "beta_p": cfg.beta_p, "max_norm_PxU_K": res["GK_norm"].value,
        "max_norm_point": _point_dict(res["GK_norm"].point),
        "max_norm_sym_PxU_K": res["GK_sym_norm"].value,
        "n_newton_failures": len(failures), "newton_failures": failures[:20]})


def check_ineq_P_full(cfg: MetricConfig, plant, spec, mesh, workers=None):
    """``L[P, f_r, x, beta_x] + <P_xU K> <= 0`` over ``(U, x, t)``."""
    t0 = _time.perf_counter()
    res, count, failures = _uxt_sweep(cfg, plant, spec, mesh, ("P-full",), workers)
    return _report("P-full", res["P-full"], count, t0, extras={
        "beta_x": cfg.beta_x, "n_newton_failures": len(failures),
        "newton_failures": failures[:20]})


def check_assumption1(spec, mesh, workers=None):
    """Smallest eigenvalue of ``H`` over ``(U, x, t)``; passes when positive."""
    t0 = _time.perf_counter()
    res, count, _ = _uxt_sweep(None, None, spec, mesh, ("H",), workers)
    w = res["H"]
    return _report("assumption1", w, count, t0, strict=True,
                   extras={"lambda_min_H": -w.value})


@dataclass(frozen=True)
class Constants:
    lambda_H: float
    c_x_zeta: float
    c_u_f: float
    p_min: float
    p_max: float

    def sufficient_for_GK(self, beta_p):
        """``2 c_u^f c_x^zeta p_max <= beta_p p_min lambda_H``."""
        return check_sufficient_condition(self, beta_p)

    def to_dict(self):
        return {"lambda_H": self.lambda_H, "c_x_zeta": self.c_x_zeta, "c_u_f": self.c_u_f,
                "p_min": self.p_min, "p_max": self.p_max}


def check_sufficient_condition(consts: Constants, beta_p):
    return 2 * consts.c_u_f * consts.c_x_zeta * consts.p_max <= beta_p * consts.p_min * consts.lambda_H


def estimate_constants(plant, spec, mesh, cfg: Optional[MetricConfig] = None, workers=None):
    """Mesh extrema of ``eig H``, ``||zeta_x||``, ``||fu||`` and ``eig P``."""
    res, _, _ = _uxt_sweep(cfg, plant, spec, mesh, ("H", "zeta_x", "fu"), workers)
    if cfg is None:
        p_min = p_max = 1.0
    else:
        xt = mesh.product(_axes(mesh, "x") + _axes(mesh, "t"))
        ev = np.linalg.eigvalsh(cfg.P(xt[:, :-1], xt[:, -1]))
        p_min, p_max = float(ev[:, 0].min()), float(ev[:, -1].max())
    return Constants(lambda_H=-res["H"].value, c_x_zeta=res["zeta_x"].value,
                     c_u_f=res["fu"].value, p_min=p_min, p_max=p_max)


# ---------------------------------------------------------------------------
# decomposition of L[M, phi, s, gamma] and its verification by perturbation


def decomposition_matrix(cfg: MetricConfig, plant, spec, vd, s, t, gamma=None):
    """``[[L_x, Pbar_xU], [Pbar_xU^T, 0]] + kappa zeta_s^T L_zeta zeta_s``.

    ``Pbar_xU(x, u, t) = P_xU(x, u - Pi0 U*, t) = P fu(x, u, t) Pi0`` exactly,
    so no optimum is needed.
    """
    gamma = cfg.gamma if gamma is None else gamma
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    n, m = spec.n, spec.m
    x, U = s[..., :n], s[..., n:]
    jet = zeta_jet(spec, U, x, t, with_t=False)
    u = spec.first_input(U)
    Lx = rate_operator(cfg.P, x, t, plant.f(x, u, t), plant.fx(x, u, t), gamma, cfg.constant)
    z = jet.zeta
    Lz = rate_operator(cfg.Q, z, t, vd.eta(z, t), vd.eta_jacobian(z, t), gamma, cfg.constant)
    Zs = zeta_s(jet)
    D = cfg.kappa * (np.swapaxes(Zs, -1, -2) @ Lz @ Zs)
    Pb = cfg.P(x, t) @ plant.fu(x, u, t)
    D[..., :n, :n] += Lx
    D[..., :n, n:n + m] += Pb
    D[..., n:n + m, :n] += np.swapaxes(Pb, -1, -2)
    return _symmetrize(D)


def lemma3_decomposition(cfg, plant, spec, vd, s, t, delta_s, gamma=None):
    """The quadratic form ``d = ds^T D ds`` of ``decomposition_matrix``."""
    D = decomposition_matrix(cfg, plant, spec, vd, s, t, gamma)
    ds = np.asarray(delta_s, dtype=float)
    return np.einsum("...i,...ij,...j->...", ds, D, ds)


def direct_L_quadratic(cfg, plant, spec, vd, s, t, delta_s, gamma=None):
    """``ds^T L[M, phi, s, gamma] ds`` with ``L`` assembled by finite differences."""
    gamma = cfg.gamma if gamma is None else gamma
    n = spec.n

    def Mfun(S, T):
        return metric_M(cfg, spec, S[..., n:], S[..., :n], T)

    def phi(S, T):
        return closed_loop_rhs(plant, spec, vd, S, T)

    L = L_operator(Mfun, phi, s, t, gamma)
    ds = np.asarray(delta_s, dtype=float)
    return np.einsum("...i,...ij,...j->...", ds, L, ds)


@dataclass
class Lemma3Result:
    """Per-time traces ``(time, run)`` over interior samples of the window."""

    t: np.ndarray
    V_delta: np.ndarray
    Vdot_delta: np.ndarray
    d: np.ndarray
    e: np.ndarray
    r_e: np.ndarray
    seed: int
    epsilon: float
    tau: float

    @property
    def max_abs_r_e(self):
        return float(np.max(np.abs(self.r_e)))

    def run_csv(self, j, path):
        rows = np.column_stack([self.t, self.V_delta[:, j], self.Vdot_delta[:, j], self.d[:, j],
                                self.e[:, j], self.r_e[:, j]])
        np.savetxt(path, rows, fmt="%.17g", delimiter=",",
                   header="t,V_delta,Vdot_delta,d,e,r_e", comments="")


def verify_lemma3(cfg: MetricConfig, plant, spec, vd, s0, n_perturb=100, epsilon=1e-3,
                  tau=1e-3, t_end=5.0, seed=0, gamma=None, workers=None):
    """Compare ``d`` with ``Vdot_delta + gamma V_delta`` along perturbed closed loops.

    ``s0`` is an AugmentedState.  Perturbations are uniform on
    ``[-epsilon, epsilon]^(n+hm)``; ``Vdot_delta`` is a centred difference, so
    the first and last samples are dropped.  Perturbed runs are split across
    workers; the draws depend only on ``seed``.
    """
    if n_perturb < 1:
        raise ValueError("n_perturb must be >= 1")
    gamma = cfg.gamma if gamma is None else gamma
    n = spec.n
    rng = np.random.default_rng(seed)
    s_nom = s0.s
    dS0 = rng.uniform(-epsilon, epsilon, size=(n_perturb, s_nom.size))
    nominal_rec = simulate_batch(plant, spec, vd, s_nom[None, :n], s_nom[None, n:], s0.t,
                                 t_end, tau)[0]
    nominal, ts = nominal_rec.s, nominal_rec.t

    def run(idx):
        starts = s_nom + dS0[idx]
        recs = simulate_batch(plant, spec, vd, starts[:, :n], starts[:, n:], s0.t, t_end, tau)
        return np.stack([r.s for r in recs], axis=1)

    w = min(default_workers() if workers is None else workers, n_perturb)
    parts = map_chunks(run, np.array_split(np.arange(n_perturb), max(w, 1)), w)
    dS = np.concatenate(parts, axis=1) - nominal[:, None]   # (time, run, dim)
    M = metric_M(cfg, spec, nominal[:, n:], nominal[:, :n], ts)
    D = decomposition_matrix(cfg, plant, spec, vd, nominal, ts, gamma)
    V = np.einsum("kpi,kij,kpj->kp", dS, M, dS)
    d = np.einsum("kpi,kij,kpj->kp", dS, D, dS)
    if np.any(V <= 0):
        k, p = np.unravel_index(int(np.argmin(V)), V.shape)
        raise MetricViolation(f"V_delta={V[k, p]:.3e} <= 0 at t={ts[k]:.6g}, run {p}")
    Vdot = (V[2:] - V[:-2]) / (2 * tau)
    V, d = V[1:-1], d[1:-1]
    e = d - Vdot - gamma * V
    return Lemma3Result(t=ts[1:-1], V_delta=V, Vdot_delta=Vdot, d=d, e=e, r_e=e / V,
                        seed=seed, epsilon=epsilon, tau=tau)
