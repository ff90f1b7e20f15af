import numpy as np
import pytest
import sympy as sp
from hypothesis import given
from hypothesis import strategies as st

from carleman_lab.errors import DomainError, HypothesisViolation, NumericError, ParameterError
from carleman_lab.forward import (BoundarySpec, ObservationSpec, Problem, SystemCoefficients,
                                  check_hypotheses, conormal_derivative, observe, solve)
from carleman_lab.geometry import GAMMA0, GAMMA1, build_annulus_grid
from carleman_lab.manufactured import ManufacturedCase, dirichlet_case, robin_dirichlet_case
from carleman_lab.manufactured import t as T_, x as X_, y as Y_
from carleman_lab.norms import lq_norm


def identity(n):
    return SystemCoefficients.constant(np.stack([np.eye(2)] * n), mu=1.0)


def rel_error(case, grid, theta=1.0):
    prob = Problem(grid, case.coefficients(), case.bspec, case.ospec, theta=theta)
    y = prob.solve(case.source(grid), case.initial(grid))
    ex = case.exact(grid)
    return lq_norm(y - ex, grid, 2) / lq_norm(ex, grid, 2), prob, y


def test_manufactured_source_matches_hand_computation():
    # y = t x1, a = I: g = x1 - 0 + b . (t, 0) + c t x1
    case = ManufacturedCase([T_ * X_], [[[1, 0], [0, 1]]], [[sp.Integer(2), sp.Integer(0)]],
                            [[sp.Integer(3)]], 1.0, BoundarySpec.dirichlet(1),
                            ObservationSpec.normal_derivative(1))
    assert sp.simplify(case.source_exprs()[0] - (X_ + 2 * T_ + 3 * T_ * X_)) == 0


def test_manufactured_source_variable_tensor():
    # div(A grad y) for A = diag(1 + x^2, 1), y = x^3: d/dx((1 + x^2) 3x^2) = 6x + 12x^3
    case = ManufacturedCase([X_**3], [[[1 + X_**2, 0], [0, 1]]], [[0, 0]], [[0]], 1.0,
                            BoundarySpec.dirichlet(1), ObservationSpec.normal_derivative(1))
    assert sp.expand(case.source_exprs()[0] + 6 * X_ + 12 * X_**3) == 0


@pytest.mark.parametrize("make", [dirichlet_case, robin_dirichlet_case])
def test_manufactured_convergence(make):
    case = make()
    e1, _, _ = rel_error(case, build_annulus_grid(1, 2, 8, 16, 1.0, 8))
    e2, _, _ = rel_error(case, build_annulus_grid(1, 2, 16, 32, 1.0, 32))
    assert e2 < 0.01
    assert e1 / e2 > 3.5


def test_crank_nicolson_no_worse():
    case = dirichlet_case()
    g = build_annulus_grid(1, 2, 16, 32, 1.0, 32)
    assert rel_error(case, g, 0.5)[0] <= rel_error(case, g, 1.0)[0] * 1.05


def test_robin_residual_shrinks():
    case = robin_dirichlet_case()
    res = []
    for nr, nth, nt in [(8, 16, 8), (16, 32, 32)]:
        _, prob, y = rel_error(case, build_annulus_grid(1, 2, nr, nth, 1.0, nt))
        res.append(prob.boundary_residual(y, GAMMA0).max())
    assert res[1] < res[0] / 3


def test_dirichlet_values_are_zero():
    case = dirichlet_case()
    _, prob, y = rel_error(case, build_annulus_grid(1, 2, 8, 16, 1.0, 8))
    assert np.all(y[:, 1:, 0, :] == 0) and np.all(y[:, 1:, -1, :] == 0)


def test_zero_source_zero_solution(grid):
    prob = Problem(grid, identity(2), BoundarySpec.dirichlet(2), ObservationSpec.normal_derivative(2))
    y = prob.solve(prob.zeros())
    assert np.all(y == 0)
    assert np.all(prob.observe(y) == 0)


def test_constants_preserved_under_neumann(grid):
    co = SystemCoefficients(1, lambda x1, x2: np.array([[[1 + 0.3 * x1**2, 0.2 + 0 * x1], [0.2 + 0 * x1, 1.0 + 0 * x1]]]),
                            mu=0.5)
    prob = Problem(grid, co, BoundarySpec.from_kinds([("N", "N")]))
    y = prob.solve(np.zeros((1,) + grid.shape), np.full((1,) + grid.space_shape, 2.5))
    assert np.allclose(y, 2.5, rtol=0, atol=1e-12)


def test_solve_is_linear(grid, rng):
    case = robin_dirichlet_case()
    prob = Problem(grid, case.coefficients(), case.bspec, case.ospec)
    g1, g2 = rng.random(prob.field_shape), rng.random(prob.field_shape)
    y12 = prob.solve(g1 + 2 * g2)
    assert np.allclose(y12, prob.solve(g1) + 2 * prob.solve(g2), rtol=1e-10, atol=1e-13)


def test_residual_reported(grid, rng):
    prob = Problem(grid, identity(2), BoundarySpec.from_kinds([("R", "D"), ("N", "D")]))
    g = rng.random(prob.field_shape)
    y = prob.solve(g)
    assert prob.residual(y, g) < 1e-12
    assert prob.residual(y + 1e-3, g) > 1e-6


def test_conormal_of_quadratic(grid):
    # y = r^2, A = I: dy/dn = 2 r1 on Gamma1 and -2 r0 on Gamma0, exact for the stencil
    co = identity(1)
    y = grid.rr**2
    assert conormal_derivative(y, co, grid, (grid.nr, 3), None) == pytest.approx(4.0, rel=1e-12)
    assert conormal_derivative(y, co, grid, (0, 5), None) == pytest.approx(-2.0, rel=1e-12)
    with pytest.raises(DomainError):
        conormal_derivative(y, co, grid, (2, 0), None)


def test_conormal_anisotropic(grid):
    # y = x1, A = [[2, 1], [1, 3]]: A grad y = (2, 1), flux . nu on Gamma1 = 2 cos + sin
    co = SystemCoefficients.constant(np.array([[[2.0, 1.0], [1.0, 3.0]]]), mu=1.0)
    y = np.broadcast_to(grid.x1, (1, grid.nt + 1) + grid.space_shape)
    prob = Problem(grid, co, BoundarySpec.from_kinds([("N", "N")]))
    dn = prob.conormal(y, GAMMA1)[0, 0]
    th = grid.theta
    assert np.allclose(dn, 2 * np.cos(th) + np.sin(th), atol=5e-2)


def test_observation_combines_trace(grid, rng):
    co = identity(2)
    bs = BoundarySpec.from_kinds([("D", "N"), ("D", "R")])
    os_ = ObservationSpec(np.array([2.0, 1.0]), np.array([0.0, 3.0]))
    prob = Problem(grid, co, bs, os_)
    y = rng.random(prob.field_shape)
    z = observe(y, co, os_, grid, bs)
    dn = prob.conormal(y, GAMMA1)
    assert np.allclose(z[0], 2 * dn[0])
    assert np.allclose(z[1], dn[1] + 3 * y[1, :, -1])


def test_module_solve_matches_problem(grid, rng):
    co = identity(1)
    bs = BoundarySpec.dirichlet(1)
    g = rng.random((1,) + grid.shape)
    assert np.array_equal(solve(co, bs, g, None, grid), Problem(grid, co, bs).solve(g))


def test_errors(grid):
    prob = Problem(grid, identity(1), BoundarySpec.dirichlet(1))
    g = prob.zeros()
    g[0, 3, 2, 2] = np.nan
    with pytest.raises(NumericError):
        prob.solve(g)
    with pytest.raises(ParameterError):
        prob.solve(np.zeros((2, 3)))
    with pytest.raises(ParameterError):
        Problem(grid, identity(1), BoundarySpec.dirichlet(1), theta=0.3)
    bad = SystemCoefficients.constant(np.stack([np.eye(2)] * 2), c=np.array([[0, 1.0], [0, 0]]), mu=1.0)
    with pytest.raises(HypothesisViolation):
        Problem(grid, bad, BoundarySpec.dirichlet(2))
    with pytest.raises(ParameterError):
        prob.observe(prob.zeros())


def test_hypothesis_examples(grid):
    co = identity(1)
    rep = check_hypotheses(co, BoundarySpec.dirichlet(1), ObservationSpec.normal_derivative(1), grid)
    assert rep.passed
    assert "det=1" in rep["H5"].detail
    rep = check_hypotheses(co, BoundarySpec.from_kinds([("D", "N")]), ObservationSpec.normal_derivative(1), grid)
    assert not rep["H5"].passed
    rep = check_hypotheses(co, BoundarySpec.dirichlet(1), None, grid, g=-np.ones((1,) + grid.shape))
    assert not rep["H2"].passed and rep["H2"].margin == -1.0
    assert any("FAIL" in line for line in rep.lines())


def _random_positive_problem(seed, grid):
    r = np.random.default_rng(seed)
    n = int(r.integers(1, 4))
    amp = r.uniform(0.5, 2.0, n)
    slope = r.uniform(0.0, 0.3, n)
    diff = lambda x1, x2: np.array(
        [[[a + s * x1**2, 0 * x1], [0 * x1, a + s * x1**2]] for a, s in zip(amp, slope)])
    c = -r.uniform(0, 1, (n, n))
    np.fill_diagonal(c, r.uniform(-1, 1, n))
    co = SystemCoefficients(n, diff, r.uniform(-0.2, 0.2, (n, 2)), c, mu=0.4)
    kinds = [tuple(r.choice(["D", "N", "R"], 2)) for _ in range(n)]
    return Problem(grid, co, BoundarySpec.from_kinds(kinds, robin=(1.0, r.uniform(0, 2)))), r


@given(st.integers(0, 10_000))
def test_positivity_property(seed):
    grid = build_annulus_grid(1, 2, 8, 16, 1.0, 16)
    prob, r = _random_positive_problem(seed, grid)
    g = r.random(prob.field_shape) * (r.random(prob.field_shape) < 0.3)
    y0 = r.random((prob.n,) + grid.space_shape)
    assert prob.solve(g, y0).min() >= -1e-12


@given(st.sampled_from([0.5, 0.75, 1.0]), st.floats(0.2, 2.0), st.floats(0.0, 2.0), st.integers(0, 1000))
def test_adjoint_identity_property(theta, gam, dlt, seed):
    grid = build_annulus_grid(1, 2, 6, 12, 1.0, 8)
    case = robin_dirichlet_case()
    os_ = ObservationSpec(np.array([gam, 1.0]), np.array([dlt, 0.5]))
    prob = Problem(grid, case.coefficients(), case.bspec, os_, theta=theta)
    r = np.random.default_rng(seed)
    g, w = r.standard_normal(prob.field_shape), r.standard_normal(prob.trace_shape)
    Fg, Fw = prob.forward_map(g), prob.adjoint_map(w)
    lhs, rhs = prob.inner_Sigma1(Fg, w), prob.inner_Q(g, Fw)
    scale = np.sqrt(prob.inner_Sigma1(Fg, Fg) * prob.inner_Sigma1(w, w)) + np.sqrt(
        prob.inner_Q(g, g) * prob.inner_Q(Fw, Fw))
    assert abs(lhs - rhs) <= 1e-10 * scale
