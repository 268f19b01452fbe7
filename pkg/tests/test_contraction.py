import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import scalar_lq, slow
from contmpc.benchmark import B, mesh_gk, mesh_p_opt
from contmpc.continuation import AugmentedState, VirtualDynamics, linear_eta
from contmpc.contraction import (CERTIFICATE_SCHEMA, MetricConfig, K_matrix, L_operator,
                                 P_xU_matrix, check_assumption1, check_ineq_GK,
                                 check_ineq_P_full, check_ineq_P_opt, check_ineq_Q,
                                 check_sufficient_condition, decomposition_matrix,
                                 direct_L_quadratic, estimate_constants, lemma3_decomposition,
                                 metric_M, rate_operator, verify_lemma3, zeta_s)
from contmpc.errors import MetricViolation
from contmpc.mesh import Axis, MeshSpec
from contmpc.ocp import hessian_H, pi0, zeta_jet, zeta_x
from contmpc.optimal import solve_ustar, ustar_sensitivity


@pytest.fixture(scope="module")
def cfg():
    return MetricConfig.identity(4, 6)


def small_uxt_mesh():
    """Corners of the x and U boxes at four times: 16 * 4 * 64 points."""
    return mesh_gk().subsample({"x": 4, "t": 1, "U": 6})


def xt_part(mesh):
    return MeshSpec([a for a in mesh.axes if not a.name.startswith("U")])


# -- metric -------------------------------------------------------------------

def test_metric_without_residual_term(bench):
    c = MetricConfig.identity(4, 6, kappa=1e-300)
    M = metric_M(c, bench.spec, np.zeros(6), bench.initial[0].x, 0.0)
    expected = np.zeros((10, 10))
    expected[:4, :4] = np.eye(4)
    assert np.allclose(M, expected, atol=1e-12)


def test_metric_positive_definite_at_sampled_points(bench, cfg):
    rng = np.random.default_rng(0)
    x, U, t = rng.uniform(-2, 2, (50, 4)), rng.uniform(-1, 1, (50, 6)), rng.uniform(0, 4, 50)
    M = metric_M(cfg, bench.spec, U, x, t)
    assert np.all(np.linalg.eigvalsh(M)[:, 0] > 0)


def test_metric_residual_part_from_raw_jacobians(bench):
    x, U, t = np.array([0.3, -0.4, 0.8, 1.0]), np.full(6, 0.2), 1.1
    Q = np.diag(np.arange(1.0, 7.0))
    c = MetricConfig.from_matrices(np.eye(4), Q, kappa=2.0)
    Zs = np.hstack([zeta_x(bench.spec, U, x, t), hessian_H(bench.spec, U, x, t)])
    M = metric_M(c, bench.spec, U, x, t)
    expected = 2.0 * Zs.T @ Q @ Zs
    expected[:4, :4] += np.eye(4)
    assert np.allclose(M, expected, atol=1e-10)


def test_rate_constants_validated():
    MetricConfig.identity(4, 6).require_rate_ordering()
    with pytest.raises(ValueError):
        MetricConfig.identity(4, 6, beta_x=0.02, beta_p=0.032).require_rate_ordering()


# -- the operator L -------------------------------------------------------------

def test_constant_metric_linear_field():
    A = np.array([[-1.0, 2.0], [0.0, -3.0]])
    M = np.array([[2.0, 0.5], [0.5, 1.0]])
    L = L_operator(lambda s, t: np.broadcast_to(M, np.shape(s)[:-1] + (2, 2)),
                   lambda s, t: s @ A.T, np.array([0.3, -0.7]), 0.0, 0.4)
    assert np.allclose(L, M @ A + A.T @ M + 0.4 * M, atol=1e-9)


def test_scalar_contracting_system():
    L = L_operator(lambda s, t: np.ones(np.shape(s)[:-1] + (1, 1)), lambda s, t: -s,
                   np.array([0.7]), 0.0, 1.0)
    assert L[0, 0] == pytest.approx(-1.0, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.floats(-2, 2), st.floats(0, 3), st.floats(0.01, 1))
def test_state_and_time_dependent_metric(s, t, gamma):
    # M = 1 + s^2 + t along sdot = -s:  L = 2s(-s) + 1 - 2M + gamma M
    Mfun = lambda y, T: (1 + y[..., :1] ** 2 + np.asarray(T)[..., None])[..., None]
    L = L_operator(Mfun, lambda y, T: -y, np.array([s]), t, gamma)
    M = 1 + s * s + t
    assert L[0, 0] == pytest.approx(-2 * s * s + 1 - 2 * M + gamma * M, abs=1e-6)


def test_constant_flag_agrees_with_fd_path():
    rng = np.random.default_rng(1)
    P = np.eye(3) * 2
    Pfun = lambda y, t: np.broadcast_to(P, np.shape(y)[:-1] + (3, 3))
    y, v, J = rng.normal(size=3), rng.normal(size=3), rng.normal(size=(3, 3))
    a = rate_operator(Pfun, y, 0.5, v, J, 0.1, constant=True)
    b = rate_operator(Pfun, y, 0.5, v, J, 0.1, constant=False)
    assert np.allclose(a, b, atol=1e-12)


def test_rate_shift_is_affine(bench, cfg):
    x, t = np.array([0.5, 0.1, -0.3, 1.0]), 0.7
    U = solve_ustar(bench.spec, x, t)
    sens = ustar_sensitivity(bench.spec, x, t, U)
    J = bench.plant.fx(x, U[:2], t) + B @ sens[:2]
    v = bench.plant.f(x, U[:2], t)
    L0 = rate_operator(cfg.P, x, t, v, J, 0.1, True)
    L1 = rate_operator(cfg.P, x, t, v, J, 0.35, True)
    assert np.allclose(L1 - L0, 0.25 * np.eye(4), atol=1e-14)


# -- K and P_xU -------------------------------------------------------------------

def test_K_vanishes_at_optimum(bench):
    rng = np.random.default_rng(2)
    for _ in range(5):
        x, t = rng.uniform(-1.6, 1.6, 4), rng.uniform(0, 4)
        U = solve_ustar(bench.spec, x, t)
        assert np.linalg.norm(K_matrix(bench.spec, U, x, t)) <= 1e-6


def test_K_vanishes_for_lq_at_any_design():
    _, spec, _ = scalar_lq(3)
    rng = np.random.default_rng(3)
    for _ in range(5):
        U, x = rng.normal(size=3), rng.normal(size=1)
        assert np.linalg.norm(K_matrix(spec, U, x, 0.0)) <= 1e-6


def test_K_nonzero_away_from_optimum(bench):
    x = np.array([1.6, 1.6, 0.0, 1.6])
    assert np.linalg.norm(K_matrix(bench.spec, np.full(6, 0.6), x, 0.5)) > 1e-3


def test_P_xU_for_benchmark(bench, cfg):
    x, t = np.array([0.2, 0.4, -0.6, 0.8]), 1.5
    G = P_xU_matrix(cfg, bench.plant, bench.spec, x, np.array([0.1, -0.3]), t)
    assert np.array_equal(G, B @ pi0(bench.spec))
    c2 = MetricConfig.from_matrices(2 * np.eye(4), np.eye(6))
    assert np.array_equal(P_xU_matrix(c2, bench.plant, bench.spec, x, np.zeros(2), t), 2 * G)


def test_P_xU_matches_fd_of_shifted_field(bench, cfg):
    x, t, ur = np.array([0.2, 0.4, -0.6, 0.8]), 1.5, np.array([0.1, -0.3])
    U = solve_ustar(bench.spec, x, t)
    fr = lambda v: bench.plant.f(x, U[:2] + v, t)
    h = 1e-6
    dfr = np.column_stack([(fr(ur + h * e) - fr(ur - h * e)) / (2 * h) for e in np.eye(2)])
    G = P_xU_matrix(cfg, bench.plant, bench.spec, x, ur, t, U_star=U)
    assert np.allclose(G, dfr @ pi0(bench.spec), rtol=1e-5, atol=1e-9)


# -- certificates ---------------------------------------------------------------------

def q_mesh(count=5):
    return MeshSpec([Axis(f"z{i}", -5, 5, count) for i in range(1, 7)] + [Axis("t", 0, 1, 2)])


@pytest.mark.parametrize("c, beta_z, passes", [(1.0, 1.5, True), (1.0, 2.0, True),
                                               (1.0, 2.5, False)])
def test_Q_linear_family(c, beta_z, passes):
    cfgq = MetricConfig.identity(1, 6, beta_z=beta_z)
    rep = check_ineq_Q(cfgq, linear_eta(c), q_mesh(3))
    assert rep.worst_margin == pytest.approx(-2 * c + beta_z, abs=1e-12)
    assert rep.passed is passes


def test_Q_benchmark_pass_and_tight_rate(bench):
    rep = check_ineq_Q(MetricConfig.identity(4, 6), bench.vd, q_mesh())
    assert rep.passed and rep.worst_margin == pytest.approx(0.0, abs=1e-15)
    rep = check_ineq_Q(MetricConfig.identity(4, 6, beta_z=0.41), bench.vd, q_mesh())
    assert not rep.passed and rep.worst_margin == pytest.approx(0.01, abs=1e-12)


def test_P_opt_desk_value_frozen(bench, cfg):
    rep = check_ineq_P_opt(cfg, bench.plant, bench.spec, mesh_p_opt("desk"))
    assert rep.passed and rep.points_checked == 5000
    # regression value recorded from the desk run
    assert rep.worst_margin == pytest.approx(-0.10674071408583467, abs=1e-7)


def test_refining_never_improves_worst_margin(bench, cfg):
    fine = mesh_p_opt("desk")
    coarse = mesh_p_opt().subsample({"x": 10, "t": 5})
    a = check_ineq_P_opt(cfg, bench.plant, bench.spec, coarse).worst_margin
    b = check_ineq_P_opt(cfg, bench.plant, bench.spec, fine).worst_margin
    assert b >= a


def test_P_opt_with_input_offset_axes(bench, cfg):
    # the benchmark is affine in u with constant B, so offsets leave the margin unchanged
    base = mesh_p_opt().subsample({"x": 10, "t": 13})
    with_ur = MeshSpec(list(base.axes[:4]) + [Axis("ur1", -0.5, 0.5, 3), Axis("ur2", -0.5, 0.5, 3),
                                              base.axes[4]])
    a = check_ineq_P_opt(cfg, bench.plant, bench.spec, base)
    b = check_ineq_P_opt(cfg, bench.plant, bench.spec, with_ur)
    assert b.points_checked == 9 * a.points_checked
    assert b.worst_margin == pytest.approx(a.worst_margin, abs=1e-9)


def test_newton_failure_fails_certificate():
    plant, spec, _ = scalar_lq(2, terminal_weight=-1.0)
    mesh = MeshSpec([Axis("x1", -1, 1, 3), Axis("t", 0, 1, 2)])
    rep = check_ineq_P_opt(MetricConfig.identity(1, 2), plant, spec, mesh)
    assert not rep.passed and rep.worst_margin == np.inf
    assert rep.extras["n_newton_failures"] > 0


@pytest.fixture(scope="module")
def shared_reports(bench, cfg):
    mesh = small_uxt_mesh()
    return {"GK": check_ineq_GK(cfg, bench.plant, bench.spec, mesh),
            "P-opt": check_ineq_P_opt(cfg, bench.plant, bench.spec, xt_part(mesh)),
            "P-full": check_ineq_P_full(cfg, bench.plant, bench.spec, mesh)}


def test_corollary_implication_on_shared_mesh(shared_reports):
    r = shared_reports
    assert r["GK"].passed and r["P-opt"].passed
    assert r["P-full"].passed
    # Weyl: the full operator is the sum of the two split ones
    assert r["P-full"].worst_margin <= r["GK"].worst_margin + r["P-opt"].worst_margin + 1e-12


def test_GK_reports_norms(shared_reports):
    ex = shared_reports["GK"].extras
    assert 0 < ex["max_norm_PxU_K"] <= ex["max_norm_sym_PxU_K"] <= 2 * ex["max_norm_PxU_K"]


def test_GK_zero_rate_fails(bench):
    c = MetricConfig.identity(4, 6, beta_p=1e-12)
    assert not check_ineq_GK(c, bench.plant, bench.spec, small_uxt_mesh()).passed


def test_GK_at_optimum_equals_minus_rate(bench, cfg):
    x, t = np.array([0.5, -0.5, 1.0, 0.0]), 1.5
    U = solve_ustar(bench.spec, x, t)
    K = K_matrix(bench.spec, U, x, t, U_star=U)
    G = B @ K[:2]
    lam = np.linalg.eigvalsh(G + G.T - cfg.beta_p * np.eye(4))[-1]
    assert lam == pytest.approx(-cfg.beta_p, abs=1e-6)


def test_P_full_huge_rate_fails(bench):
    c = MetricConfig.identity(4, 6, beta_x=1e3)
    rep = check_ineq_P_full(c, bench.plant, bench.spec, small_uxt_mesh())
    assert not rep.passed and rep.worst_margin > 900


def test_assumption1_benchmark_small_mesh(bench):
    rep = check_assumption1(bench.spec, small_uxt_mesh())
    assert rep.passed and rep.extras["lambda_min_H"] > 2.0


def test_assumption1_lq_exact():
    _, spec, _ = scalar_lq(2)
    mesh = MeshSpec([Axis("x1", -1, 1, 3), Axis("t", 0, 1, 2), Axis("U1", -1, 1, 3),
                     Axis("U2", -1, 1, 3)])
    rep = check_assumption1(spec, mesh)
    assert rep.passed and rep.extras["lambda_min_H"] == pytest.approx(2.0, abs=1e-8)


def test_assumption1_degenerate_cost_fails():
    from contmpc.ocp import PlantModel, euler_ocp
    plant = PlantModel(1, 1, lambda x, u, t: u, lambda x, u, t: np.zeros(x.shape + (1,)),
                       lambda x, u, t: np.ones(x.shape + (1,)))
    spec = euler_ocp(plant, 2, 1.0, lambda x, u, t: 0 * u[..., 0], lambda x, u, t: 0 * x,
                     lambda x, u, t: 0 * u, lambda x, t: 0 * x[..., 0], lambda x, t: 0 * x)
    mesh = MeshSpec([Axis("x1", -1, 1, 2), Axis("t", 0, 1, 1), Axis("U1", 0, 1, 2),
                     Axis("U2", 0, 1, 2)])
    rep = check_assumption1(spec, mesh)
    assert not rep.passed and rep.extras["lambda_min_H"] == 0.0


def test_parallel_sweep_matches_serial(bench, cfg):
    mesh = small_uxt_mesh()
    a = check_ineq_GK(cfg, bench.plant, bench.spec, mesh, workers=1)
    b = check_ineq_GK(cfg, bench.plant, bench.spec, mesh, workers=2)
    assert a.worst_margin == b.worst_margin and a.argmax_point == b.argmax_point


def test_report_json_schema(shared_reports):
    for rep in shared_reports.values():
        doc = json.loads(json.dumps(rep.to_dict()))
        jsonschema.validate(doc, CERTIFICATE_SCHEMA)
        assert set(doc["argmax_point"]) >= {"x", "t"}


def test_estimate_constants(bench, cfg):
    c = estimate_constants(bench.plant, bench.spec, small_uxt_mesh(), cfg)
    assert c.c_u_f == pytest.approx(1.0, abs=1e-15)
    assert c.p_min == c.p_max == 1.0
    assert c.lambda_H > 2.0 and c.c_x_zeta > 0
    holds = 2 * c.c_u_f * c.c_x_zeta * c.p_max <= 0.032 * c.p_min * c.lambda_H
    assert check_sufficient_condition(c, 0.032) == holds == c.sufficient_for_GK(0.032)


# -- decomposition and its verification ---------------------------------------------

def random_state(rng):
    return np.concatenate([rng.uniform(-1.5, 1.5, 4), rng.uniform(-0.5, 0.5, 6)]), rng.uniform(0, 4)


def test_decomposition_matches_direct_operator(bench, cfg):
    rng = np.random.default_rng(4)
    for _ in range(5):
        s, t = random_state(rng)
        ds = rng.normal(size=10)
        d = lemma3_decomposition(cfg, bench.plant, bench.spec, bench.vd, s, t, ds)
        direct = direct_L_quadratic(cfg, bench.plant, bench.spec, bench.vd, s, t, ds)
        assert abs(d - direct) <= 1e-3 * abs(direct)


def test_decomposition_is_a_quadratic_form(bench, cfg):
    rng = np.random.default_rng(5)
    s, t = random_state(rng)
    ds = rng.normal(size=10)
    d1 = lemma3_decomposition(cfg, bench.plant, bench.spec, bench.vd, s, t, ds)
    d2 = lemma3_decomposition(cfg, bench.plant, bench.spec, bench.vd, s, t, 2 * ds)
    assert d2 == pytest.approx(4 * d1, rel=1e-14)
    assert lemma3_decomposition(cfg, bench.plant, bench.spec, bench.vd, s, t, np.zeros(10)) == 0


def test_decomposition_blocks(bench, cfg):
    rng = np.random.default_rng(6)
    s, t = random_state(rng)
    D = decomposition_matrix(cfg, bench.plant, bench.spec, bench.vd, s, t)
    jet = zeta_jet(bench.spec, s[4:], s[:4], t, with_t=False)
    Zs = zeta_s(jet)
    Lz = 2 * bench.vd.eta_jacobian(jet.zeta, t) + cfg.gamma * np.eye(6)
    rest = D - Zs.T @ Lz @ Zs
    assert np.allclose(rest[:4, 4:6], B, atol=1e-10)
    assert np.allclose(rest[4:, 4:], 0.0, atol=1e-10)
    assert np.allclose(rest[:4, 6:], 0.0, atol=1e-10)


@pytest.fixture(scope="module")
def short_lemma3(bench, cfg):
    return {eps: verify_lemma3(cfg, bench.plant, bench.spec, bench.vd, bench.initial[0],
                               n_perturb=1, epsilon=eps, t_end=1.0)
            for eps in (1e-3, 1e-4)}


def test_lemma3_error_is_first_order_in_perturbation(short_lemma3):
    assert short_lemma3[1e-4].max_abs_r_e < short_lemma3[1e-3].max_abs_r_e


def test_lemma3_smaller_step_does_not_grow_error(bench, cfg, short_lemma3):
    half = verify_lemma3(cfg, bench.plant, bench.spec, bench.vd, bench.initial[0], n_perturb=1,
                         epsilon=1e-3, tau=5e-4, t_end=1.0)
    assert half.max_abs_r_e <= short_lemma3[1e-3].max_abs_r_e * 1.001


def test_lemma3_traces_and_csv(tmp_path, short_lemma3):
    r = short_lemma3[1e-3]
    assert r.t.shape == (999,) and r.r_e.shape == (999, 1)
    assert np.allclose(r.e, r.d - r.Vdot_delta - 0.1 * r.V_delta)
    assert np.all(r.V_delta > 0)
    r.run_csv(0, tmp_path / "run.csv")
    lines = (tmp_path / "run.csv").read_text().splitlines()
    assert lines[0] == "t,V_delta,Vdot_delta,d,e,r_e" and len(lines) == 1000


def test_lemma3_seeded(bench, cfg):
    kw = dict(n_perturb=2, epsilon=1e-3, tau=1e-2, t_end=0.2)
    a = verify_lemma3(cfg, bench.plant, bench.spec, bench.vd, bench.initial[0], seed=3, **kw)
    b = verify_lemma3(cfg, bench.plant, bench.spec, bench.vd, bench.initial[0], seed=3, **kw)
    c = verify_lemma3(cfg, bench.plant, bench.spec, bench.vd, bench.initial[0], seed=4, **kw)
    assert np.array_equal(a.r_e, b.r_e) and not np.array_equal(a.r_e, c.r_e)
    p = verify_lemma3(cfg, bench.plant, bench.spec, bench.vd, bench.initial[0], seed=3,
                      workers=2, **kw)
    assert np.allclose(p.r_e, a.r_e, rtol=1e-12, atol=1e-15)


def test_lemma3_rejects_non_positive_metric(bench):
    bad = MetricConfig.from_matrices(-np.eye(4), np.eye(6), kappa=1e-6)
    with pytest.raises(MetricViolation):
        verify_lemma3(bad, bench.plant, bench.spec, bench.vd, bench.initial[0], n_perturb=1,
                      tau=1e-2, t_end=0.1)
    with pytest.raises(ValueError):
        verify_lemma3(MetricConfig.identity(4, 6), bench.plant, bench.spec, bench.vd,
                      bench.initial[0], n_perturb=0)


@slow
@pytest.mark.parametrize("ic, expected", [(0, 0.004097167525504031), (1, 0.0037749917014100773),
                                          (2, 0.002141866320452269)])
def test_lemma3_reproduction_values(bench, cfg, ic, expected):
    # recorded from the 100-perturbation runs, seed 0
    res = verify_lemma3(cfg, bench.plant, bench.spec, bench.vd, bench.initial[ic])
    assert res.max_abs_r_e == pytest.approx(expected, rel=1e-9)
