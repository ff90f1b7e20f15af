import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from carleman_lab.errors import ParameterError, SingularityError
from carleman_lab.geometry import GAMMA0, GAMMA1, build_annulus_grid
from carleman_lab.weights import (ALPHA_KINDS, C_m, CarlemanParams, bootstrap_exponents, choose_K,
                                  comparison_chain, eval_weight, exp_weight, final_time_for_width,
                                  psi0, psi0_gradient_norm, psi0_normal_derivative, search_lambda,
                                  weight_domination_check, weight_field)


def test_psi0_conditions(grid):
    p = psi0(grid)
    assert np.max(np.abs(p[0])) <= 1e-14
    assert np.max(np.abs(p[-1] - 1)) <= 1e-14
    assert psi0_gradient_norm(grid).min() > 0
    assert psi0_normal_derivative(grid, GAMMA0).max() < 0
    assert psi0_normal_derivative(grid, GAMMA1).min() > 0


def test_psi0_midpoint():
    g = build_annulus_grid(1, 2, 8, 16, 1, 4)
    assert psi0(g)[4, 0] == pytest.approx(0.5, abs=1e-15)


def test_choose_K():
    K = choose_K()
    assert K == 7
    assert Fraction(K + 1, K) <= Fraction(8, 7)
    assert Fraction(K, K - 1) > Fraction(8, 7)


def test_params_defaults_and_validation():
    p = CarlemanParams(lam=1.0, s=4.0)
    assert p.s_prime == pytest.approx(1.25 * 2 * 4)
    assert p.gamma == pytest.approx(2 ** (1 / 6))
    for bad in [dict(lam=0, s=1), dict(lam=1, s=-1), dict(lam=1, s=1, gamma_bar=1.0),
                dict(lam=1, s=1, s_prime=2.0), dict(lam=1, s=1, K=6), dict(lam=1, s=1, sigma=1.0),
                dict(lam=1, s=1, m=0)]:
        with pytest.raises(ParameterError):
            CarlemanParams(**bad)


def test_eval_weight_examples():
    g = build_annulus_grid(1, 2, 8, 16, 1.0, 4)
    p = CarlemanParams(lam=1.0, s=1.0)
    assert eval_weight("phi", g, p, 0.5, (1.0, 0.0)) == pytest.approx(4 * math.e**7, rel=1e-14)
    a = eval_weight("alpha", g, p, 0.5, (1.0, 0.0))
    assert a == pytest.approx((math.e**7 - math.e**12) / 0.25, rel=1e-14)
    assert a < 0
    with pytest.raises(SingularityError):
        eval_weight("phi", g, p, 0.0, (1.0, 0.0))
    with pytest.raises(SingularityError):
        eval_weight("alpha", g, p, 1.0, (1.0, 0.0))
    assert exp_weight("alpha", g, p, 3.0, 0.0, (1.5, 0.0)) == 0.0
    assert exp_weight("alpha", g, p, 3.0, 1e-4, (1.5, 0.0)) < 1e-300


@given(st.floats(0.05, 20.0), st.integers(7, 12))
def test_weight_ordering(lam, K):
    g = build_annulus_grid(1, 2, 8, 16, 1.0, 8)
    p = CarlemanParams(lam=lam, s=1.0, K=K)
    f = {k: weight_field(k, g, p).values for k in ("phi", "phi_bar", "phi_under", "alpha",
                                                    "alpha_bar", "alpha_under", "alpha0", "phi0")}
    assert np.all(f["phi_under"] <= f["phi"] * (1 + 1e-15))
    assert np.all(f["phi"] <= f["phi_bar"] * (1 + 1e-15))
    assert np.all(f["alpha_under"] <= f["alpha"] * (1 - 1e-15))
    assert np.all(f["alpha"] <= f["alpha_bar"] * (1 - 1e-15))
    for k in ALPHA_KINDS:
        assert np.all(f[k] < 0)
    assert np.all(f["phi"] > 0) and np.all(f["phi0"] > 0)


def test_weight_field_endpoints(grid):
    p = CarlemanParams(lam=1.0, s=1.0)
    a = weight_field("alpha", grid, p)
    e = a.exponent(2.0)
    assert np.all(e[[0, -1]] == -np.inf)
    assert np.all(np.exp(e[[0, -1]]) == 0)
    assert np.all(np.isinf(weight_field("phi", grid, p).full()[[0, -1]]))
    with pytest.raises(ParameterError):
        weight_field("phi", grid, p).exponent(1.0)


def test_alpha_precision_for_large_lambda():
    # direct e^a - e^b loses every digit of e^a for a << b; the stored form keeps them
    g = build_annulus_grid(1, 2, 8, 16, 1.0, 4)
    p = CarlemanParams(lam=10.0, s=1.0)
    v = weight_field("alpha", g, p).values
    exact = (np.exp(10 * (psi0(g) + 7)) - np.exp(120)) / (g.t[1:-1, None, None] * (1 - g.t[1:-1, None, None]))
    assert np.allclose(v, exact, rtol=1e-13)


@pytest.mark.parametrize("m", [1, 2, 3, 4])
def test_C_m_against_numeric_maximization(m):
    res = minimize_scalar(lambda mu: -(mu**m) * math.exp(-mu), bounds=(0, 50), method="bounded",
                          options={"xatol": 1e-12})
    assert C_m(m) == pytest.approx(-res.fun, rel=1e-10)


def test_C_m_values():
    assert C_m(1) == pytest.approx(0.36788, abs=1e-5)
    assert C_m(3) == pytest.approx(1.34425, abs=1e-5)


def test_domination_example():
    g = build_annulus_grid(1, 2, 16, 32, 1.0, 64)
    r = weight_domination_check(CarlemanParams(lam=5.0, s=10.0, m=2), g, 10.0, 20.0)
    assert r.holds
    assert r.C_m == pytest.approx(C_m(2))
    with pytest.raises(ParameterError):
        weight_domination_check(CarlemanParams(lam=5.0, s=10.0), g, 10.0, 10.0)


def test_domination_brute_force(grid):
    # exhaustive loop over nodes as the oracle for the vectorized sup
    p = CarlemanParams(lam=1.5, s=2.0, m=2)
    r = weight_domination_check(p, grid, 2.0, 4.0)
    best = -np.inf
    for k in range(1, grid.nt):
        for i in range(grid.nr + 1):
            x = (grid.r[i], 0.0)
            phi = eval_weight("phi", grid, p, grid.t[k], x)
            a = eval_weight("alpha", grid, p, grid.t[k], x)
            best = max(best, 2 * math.log(phi * 4.0 * 1.5) + 2.0 * a)
    assert r.log_sup_ratio == pytest.approx(best, rel=1e-12)


def test_search_lambda_threshold():
    thr = 3.7
    lam = search_lambda(lambda l: l >= thr)
    assert lam == pytest.approx(thr, rel=1e-6)
    assert lam >= thr
    assert search_lambda(lambda l: False) is None
    assert search_lambda(lambda l: True) == 0.05


def test_chain_is_equality_on_outer_circle(grid):
    # alpha == alpha_bar on Gamma1, so the first comparison is non-strict there
    p = CarlemanParams(lam=2.0, s=5.0)
    a = weight_field("alpha", grid, p).values
    abar = weight_field("alpha_bar", grid, p).values
    assert np.allclose(a[:, -1], abar[:, -1], rtol=1e-15)
    assert comparison_chain(p, grid, 1).first_ok


def test_chain_large_lambda(grid):
    # alpha and alpha_bar round to the same double here; the sign must survive
    assert comparison_chain(CarlemanParams(lam=40.0, s=5.0), grid, 2).holds


def test_bootstrap_examples():
    assert bootstrap_exponents(10, 2) == [2, 4, 6, 9, Fraction(27, 2)]
    assert bootstrap_exponents(2, 2) == [2, 4]
    assert bootstrap_exponents(3, 3) == [2, Fraction(10, 3)]
    with pytest.raises(ParameterError):
        bootstrap_exponents(1.5, 2)
    with pytest.raises(ParameterError):
        bootstrap_exponents(3, 0)


@given(st.floats(2.0, 200.0), st.integers(1, 6))
def test_bootstrap_monotone(q, N):
    seq = bootstrap_exponents(q, N)
    assert seq[0] == 2
    assert all(a < b for a, b in zip(seq, seq[1:]))
    assert seq[-1] > q
    assert len(seq) == 1 or seq[-2] <= q


def test_final_time_for_width():
    # near t = T/2, s*alpha on the outer circle is -tau^2 / (2 width^2) + O(tau^4)
    lam, K, s, width = 2.0, 7, 40.0, 0.1
    T = final_time_for_width(lam, K, s, width)
    p = CarlemanParams(lam=lam, s=s)
    x = (2.0, 0.0)

    def e(tau):
        return s * eval_weight("alpha", build_annulus_grid(1, 2, 4, 8, T, 2), p, T * (0.5 + tau), x)

    for tau in (1e-3, 1e-2):
        assert (e(0.0) - e(tau)) * 2 * width**2 / tau**2 == pytest.approx(1.0, rel=5 * tau**2)
