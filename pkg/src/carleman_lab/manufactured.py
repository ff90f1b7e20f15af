"""Manufactured solutions: pick y*, derive the source symbolically.

The source is computed with sympy in Cartesian coordinates straight from the
divergence form of the operator, independently of the polar discretization it
is used to test.
"""

from dataclasses import dataclass

import numpy as np
import sympy as sp_

from carleman_lab.forward import BoundarySpec, ObservationSpec, SystemCoefficients

t, x, y = sp_.symbols("t x y", real=True)
R = sp_.sqrt(x**2 + y**2)
COS = x / R
SIN = y / R


def _lambdify(expr):
    f = sp_.lambdify((t, x, y), expr, modules="numpy")

    def call(tt, x1, x2):
        out = np.asarray(f(tt, x1, x2), dtype=float)
        return np.broadcast_to(out, np.broadcast(tt, x1, x2).shape)

    return call


def _space_callable(exprs, lead):
    fns = [_lambdify(e) for e in np.ravel(exprs)]

    def call(x1, x2):
        x1 = np.asarray(x1, dtype=float)
        vals = [f(0.0, x1, x2) for f in fns]
        return np.stack(vals).reshape(lead + x1.shape)

    return call


@dataclass
class ManufacturedCase:
    """Exact solution ``y_exact`` (list of sympy expressions in t, x, y) and coefficients."""

    y_exact: list
    a: list  # n x 2 x 2 sympy expressions
    b: list  # n x 2
    c: list  # n x n
    mu: float
    bspec: BoundarySpec
    ospec: ObservationSpec

    @property
    def n(self):
        return len(self.y_exact)

    def source_exprs(self):
        n = self.n
        out = []
        X = (x, y)
        for i in range(n):
            yi = self.y_exact[i]
            grad = [sp_.diff(yi, X[k]) for k in range(2)]
            div = sum(sp_.diff(sum(self.a[i][j][k] * grad[k] for k in range(2)), X[j]) for j in range(2))
            drift = sum(self.b[i][k] * grad[k] for k in range(2))
            react = sum(self.c[i][l] * self.y_exact[l] for l in range(n))
            out.append(sp_.diff(yi, t) - div + drift + react)
        return out

    def coefficients(self):
        n = self.n
        return SystemCoefficients(
            n,
            _space_callable(self.a, (n, 2, 2)),
            _space_callable(self.b, (n, 2)),
            _space_callable(self.c, (n, n)),
            self.mu,
        )

    def _sample(self, exprs, grid):
        T = grid.t[:, None, None]
        return np.stack([_lambdify(e)(T, grid.x1[None], grid.x2[None]) for e in exprs])

    def exact(self, grid):
        return self._sample(self.y_exact, grid)

    def source(self, grid):
        return self._sample(self.source_exprs(), grid)

    def initial(self, grid):
        return self.exact(grid)[:, 0]


def dirichlet_case(r0=1.0, r1=2.0, time_factor=t):
    """Two coupled components, Dirichlet on both circles, anisotropic tensors with
    cross terms, drift and non-positive off-diagonal coupling."""
    radial = sp_.sin(sp_.pi * (R - r0) / (r1 - r0))
    half = sp_.Rational(1, 2)
    tenth = sp_.Rational(1, 10)
    return ManufacturedCase(
        y_exact=[time_factor * radial * COS, time_factor * radial * SIN],
        a=[
            [[1 + 2 * tenth * x**2, tenth * x * y], [tenth * x * y, 1 + 2 * tenth * y**2]],
            [[sp_.Rational(3, 2), 3 * tenth], [3 * tenth, 8 * tenth]],
        ],
        b=[[3 * tenth * y, -2 * tenth], [sp_.Integer(0), 4 * tenth * x]],
        c=[[sp_.Integer(1), -half], [-half / 2, half]],
        mu=0.6,
        bspec=BoundarySpec.dirichlet(2),
        ospec=ObservationSpec.normal_derivative(2),
    )


def robin_dirichlet_case(r0=1.0, r1=2.0, T=1.0, beta=1.0, eta=1.0):
    """Robin on the inner circle, Dirichlet on the outer one, normal-derivative
    observation. Isotropic diffusion ``a_i I`` so the Robin condition on the
    inner circle only involves d/dr."""
    L = r1 - r0
    a_vals = [sp_.Integer(1), sp_.Rational(1, 2)]
    ys = []
    for i, ai in enumerate(a_vals):
        kappa = (1 + eta * L / (beta * ai)) / L
        phi = (r1 - R) * (1 + kappa * (R - r0))
        ang = 1 + sp_.Rational(1, 2) * (COS if i == 0 else SIN)
        ys.append((t / T) * phi * ang)
    z = sp_.Integer(0)
    return ManufacturedCase(
        y_exact=ys,
        a=[[[ai, z], [z, ai]] for ai in a_vals],
        b=[[z, z], [z, z]],
        c=[[sp_.Rational(1, 2), -sp_.Rational(1, 2)], [-sp_.Rational(1, 4), sp_.Rational(1, 4)]],
        mu=0.5,
        bspec=BoundarySpec(np.array([[beta, 0.0], [beta, 0.0]]), np.array([[eta, 1.0], [eta, 1.0]])),
        ospec=ObservationSpec.normal_derivative(2),
    )
