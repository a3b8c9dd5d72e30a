import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from conftest import random_probability_grid
from dh_lyapunov.chain_sim import g_map, h_map, sigma_trajectory
from dh_lyapunov.dist_models import mellin
from dh_lyapunov.errors import Divergent, InvalidParameter, NoConvergence
from dh_lyapunov.transfer_grid import (
    OperatorConfig,
    TailGrid,
    TransferOperator,
    L_functional,
    apply_S,
    apply_T,
    fixed_point_nu,
    fixed_point_omega0,
    grid_from_csv,
    grid_sidecar,
    grid_to_csv,
    log_nodes,
    point_mass,
    support_bound,
    triple_norm,
    zero_grid,
)

OUT = np.geomspace(0.05, 500.0, 301)


def segment_oracle(grid, fun):
    """sum_j (dG_j / du_j) int_{u_j}^{u_j+1} fun(e^u) du, by adaptive quadrature."""
    u = np.log(grid.nodes)
    total = 0.0
    for j in range(u.size - 1):
        dm = grid.values[j] - grid.values[j + 1]
        if dm == 0:
            continue
        val, _ = integrate.quad(lambda x: fun(math.exp(x)), u[j], u[j + 1], epsabs=1e-13, epsrel=1e-12)
        total += dm / (u[j + 1] - u[j]) * val
    return total


# operators ----------------------------------------------------------------------------


@pytest.mark.parametrize("eps", [0.0, 0.1, 0.3])
def test_apply_T_point_mass(model, eps):
    s0 = 2.7
    out = apply_T(point_mass(s0), model, eps, out_nodes=OUT)
    assert np.allclose(out.values, model.tail(OUT / g_map(eps, s0)), atol=1e-14)


@pytest.mark.parametrize("eps", [0.0, 0.2])
def test_apply_S_point_mass(model, eps):
    s0 = 0.37
    out = apply_S(point_mass(s0), model, eps, out_nodes=OUT)
    assert np.allclose(out.values, model.tail(OUT / h_map(eps, s0)), atol=1e-14)


def test_apply_zero_measure(model):
    z = zero_grid(np.geomspace(0.2, 100, 50))
    assert np.all(apply_T(z, model, 0.1).values == 0)
    assert np.all(apply_S(z, model, 0.1).values == 0)


@pytest.mark.parametrize("seed", range(8))
def test_apply_T_mass_and_double_integral(model, seed):
    rng = np.random.default_rng(seed)
    nodes = np.geomspace(0.2, 400.0, 120)
    g = random_probability_grid(rng, nodes, atom=0.1 * rng.random())
    tau = np.array([1e-4, 0.3, 1.0, 3.7, 25.0, 300.0])
    out = apply_T(g, model, 0.05, out_nodes=tau, debug=True)
    assert out.values[0] == pytest.approx(1.0, abs=1e-12)
    assert out.lower_limit == g.lower_limit
    for t, v in zip(tau[1:], out.values[1:]):
        atom = (g.lower_limit - g.values[0]) * float(model.tail(t / g_map(0.05, nodes[0])))
        oracle = atom + segment_oracle(g, lambda s: float(model.tail(t / g_map(0.05, s))))
        assert abs(v - oracle) < 1e-6


def test_apply_S_linearity(model):
    rng = np.random.default_rng(3)
    nodes = np.geomspace(1e-3, 5.0, 90)
    g1, g2 = random_probability_grid(rng, nodes), random_probability_grid(rng, nodes)
    a, b = 0.7, 2.3
    combo = TailGrid(nodes, a * g1.values + b * g2.values, a + b)
    lhs = apply_S(combo, model, 0.1).values
    rhs = a * apply_S(g1, model, 0.1).values + b * apply_S(g2, model, 0.1).values
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_apply_S_eps0_support(model):
    nodes = np.geomspace(5.0, 50.0, 60)
    g = random_probability_grid(np.random.default_rng(1), nodes)
    out = apply_S(g, model, 0.0, out_nodes=np.geomspace(0.1, 10.0, 200))
    assert np.all(out.values[out.nodes >= model.support.c_plus] == 0)
    assert out.is_monotone()


def test_monotonicity_preserved(model):
    rng = np.random.default_rng(5)
    nodes = np.geomspace(0.2, 1e4, 400)
    for eps in (0.0, 0.01, 0.2):
        out = apply_T(random_probability_grid(rng, nodes), model, eps, debug=True)
        assert out.is_monotone()


def test_operator_rejects_bad_kind(model):
    with pytest.raises(InvalidParameter):
        TransferOperator(model, 0.1, "X", np.geomspace(1, 2, 10))


# support bound ----------------------------------------------------------------------------


def test_support_bound_closed_form(model):
    b = support_bound(model, 0.1)
    assert b == pytest.approx((2 + math.sqrt(4.12)) / 0.02, rel=1e-15)
    assert b == pytest.approx(201.48891565, rel=1e-9)
    assert abs(3.0 * g_map(0.1, b) - b) < 1e-10 * b
    for eps in (0.3, 0.1, 0.01, 0.001):
        assert support_bound(model, eps) > (3.0 - 1) / eps**2
    with pytest.raises(InvalidParameter):
        support_bound(model, 0.0)


# fixed points -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def nu01(model, alpha):
    return fixed_point_nu(model, 0.1, OperatorConfig(epsilon=0.1), alpha=alpha)


def test_nu_eps_residual_under_refined_quadrature(model, nu01, alpha):
    op = TransferOperator(model, 0.1, "T", nu01.nodes, quad_points=8)
    assert triple_norm(op.apply(nu01), alpha / 2, nu01) <= 1e-6


def _fine_residual(model, g, alpha):
    fine = g.resampled(log_nodes(g.nodes[0], g.nodes[-1], 2 * g.nodes.size - 1, extra=(10.0,)))
    return triple_norm(apply_T(fine, model, 0.1), alpha / 2, fine)


def test_nu_eps_residual_on_finer_grid_is_second_order(model, nu01, alpha):
    coarse = fixed_point_nu(model, 0.1, OperatorConfig(epsilon=0.1, grid_size=1024), alpha=alpha)
    r_fine, r_coarse = _fine_residual(model, nu01, alpha), _fine_residual(model, coarse, alpha)
    assert r_fine <= 5e-6
    assert 3.0 < r_coarse / r_fine < 5.0


def test_nu_eps_support_and_mass(model, nu01):
    b = support_bound(model, 0.1)
    assert nu01.lower_limit == 1.0
    assert nu01.values[0] == pytest.approx(1.0, abs=1e-12)
    assert np.all(nu01.values[nu01.nodes > b] == 0)
    assert nu01.values[nu01.nodes < 0.99 * b].min() > 0
    assert nu01.is_monotone()


def test_nu_eps_iteration_count(model, nu01, alpha):
    rate = mellin(model, alpha / 2)
    bound = math.log(1e-9 / 10.0) / math.log(rate) + 10
    assert nu01.meta["iterations"] <= bound
    assert nu01.meta["rate"] <= rate + 0.02


def test_nu_eps_against_sigma_chain(model, nu01):
    eps = 0.1
    s = np.sort(sigma_trajectory(model, 12, 10_000_000, eps)[20_000:] / eps**2)
    emp = np.arange(1, s.size + 1) / s.size
    model_cdf = 1.0 - np.asarray(nu01(s))
    ks = max(np.max(np.abs(emp - model_cdf)), np.max(np.abs(emp - 1 / s.size - model_cdf)))
    assert ks <= 0.01


def test_nu_no_convergence_reports_residual(model, alpha):
    with pytest.raises(NoConvergence) as info:
        fixed_point_nu(model, 0.1, OperatorConfig(epsilon=0.1, grid_size=256, max_iter=3), alpha=alpha)
    assert info.value.iterations == 3 and info.value.residual > 0


def test_omega0_normalization_and_support(model, zero):
    om = zero.omega0
    y = om.meta["y"]
    assert y == pytest.approx(0.75)
    assert om(y) == pytest.approx(1.0, abs=1e-14)
    assert om.is_monotone()
    assert om(model.support.c_plus) == 0.0
    assert np.all(np.isfinite(om.values))


def test_omega0_rejects_bad_y(model, alpha):
    for y in (0.0, 1.5, 2.0):
        with pytest.raises(InvalidParameter):
            fixed_point_omega0(model, y=y, alpha=alpha, config=OperatorConfig(grid_size=64))


def test_omega0_two_anchors_proportional(model, alpha, zero):
    other = fixed_point_omega0(model, y=0.4, alpha=alpha)
    x = np.geomspace(1e-7, 1.5, 50)
    ratio = np.asarray(zero.omega0(x)) / np.asarray(other(x))
    assert np.ptp(ratio) / ratio.mean() < 0.01


# norm and functional --------------------------------------------------------------------


def test_triple_norm_trivial_cases():
    nodes = np.geomspace(0.5, 10, 40)
    assert triple_norm(zero_grid(nodes), 0.4) == 0.0
    for beta in (0.1, 0.5, 0.9):
        assert triple_norm(point_mass(1.0), beta) == pytest.approx(1 / beta, rel=1e-12)
    g = random_probability_grid(np.random.default_rng(0), nodes)
    assert triple_norm(g, 0.3, g) == 0.0


def test_triple_norm_against_quadrature():
    g = random_probability_grid(np.random.default_rng(4), np.geomspace(0.3, 30, 25))
    h = random_probability_grid(np.random.default_rng(5), np.geomspace(0.3, 30, 25))
    beta = 0.35
    val, _ = integrate.quad(lambda t: t ** (beta - 1) * abs(g(t) - h(t)), 0.3, 30, limit=500,
                            points=list(g.nodes[1:-1]), epsabs=1e-12)
    assert triple_norm(g, beta, h) == pytest.approx(val, rel=1e-8)


def test_triple_norm_divergence_flags(zero, alpha):
    with pytest.raises(Divergent):
        triple_norm(zero.omega0, alpha - 0.1)
    with pytest.raises(Divergent):
        triple_norm(zero.nu0, alpha + 0.1)
    with pytest.raises(InvalidParameter):
        triple_norm(point_mass(1.0), 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.95))
def test_triple_norm_triangle(seed, beta):
    rng = np.random.default_rng(seed)
    nodes = np.geomspace(0.2, 50, 30)
    a, b, c = (random_probability_grid(rng, nodes) for _ in range(3))
    assert triple_norm(a, beta, c) <= triple_norm(a, beta, b) + triple_norm(b, beta, c) + 1e-12


def test_L_functional_trivial_cases():
    assert L_functional(point_mass(7.0), 0.3) == pytest.approx(math.log1p(0.09 * 7.0), rel=1e-13)
    assert L_functional(point_mass(7.0), 0.0) == 0.0


@pytest.mark.parametrize("seed", range(3))
def test_L_functional_direct_form(seed):
    eps = 0.05
    g = random_probability_grid(np.random.default_rng(seed), np.geomspace(0.2, 2000.0, 200), atom=0.05)
    oracle = 0.05 * math.log1p(eps**2 * 0.2) + segment_oracle(g, lambda s: math.log1p(eps**2 * s))
    assert L_functional(g, eps) == pytest.approx(oracle, abs=1e-6)


def test_L_functional_with_extensions(zero, alpha):
    om = zero.omega0
    x0 = om.nodes[0]
    head = om.values[0] * x0**alpha
    u = np.log(om.nodes)
    inner = sum(integrate.quad(lambda v: float(om(math.exp(v))) * math.exp(v) / (1 + math.exp(v)),
                               u[j], u[j + 1], epsabs=1e-15)[0] for j in range(u.size - 1))
    tail_part, _ = integrate.quad(lambda x: head * x ** (-alpha) / (1 + x), 0, x0, epsabs=1e-14)
    assert L_functional(om, 1.0) == pytest.approx(inner + tail_part, rel=1e-7)
    nu = zero.nu0
    eps = 0.02
    # tail piece in log x: the x-form loses the slowly decaying tail
    coef = nu.values[-1] * nu.nodes[-1] ** alpha
    far, _ = integrate.quad(lambda u: coef * math.exp((1 - alpha) * u) * eps**2 / (1 + eps**2 * math.exp(u)),
                            math.log(nu.nodes[-1]), 300.0, limit=500, epsabs=1e-16)
    core = L_functional(TailGrid(nu.nodes, nu.values, 1.0), eps)
    assert L_functional(nu, eps) == pytest.approx(core + far, rel=1e-9)


def test_grid_serialization_round_trip(zero):
    g = zero.omega0
    back = grid_from_csv(grid_to_csv(g), grid_sidecar(g, "abc"))
    assert np.array_equal(back.nodes, g.nodes) and np.array_equal(back.values, g.values)
    assert back.head_exponent == g.head_exponent and back.role == "omega0"
