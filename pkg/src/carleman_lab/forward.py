"""Coupled linear parabolic system on the annulus.

For components ``i = 1..n``::

    D_t y_i - div(A_i grad y_i) + b_i . grad y_i + sum_l c_il y_l = g_i   in Q
    beta_i dy_i/dn_A + eta_i y_i = 0                                      on each circle

with observation ``zeta_i = gamma_i dy_i/dn_A + delta_i y_i`` on the outer
cylinder. Space is discretized by a vertex-centred finite-volume scheme on the
polar grid (half cells on the two circles, conormal Robin flux on the boundary
faces, identity rows on Dirichlet circles); time by the theta-scheme, implicit
Euler by default. The mass matrix is the trapezoidal quadrature of
``geometry``, so the discrete weak form and the norms share one measure.

Fields are arrays:

* space-time field: ``(n, nt+1, nr+1, ntheta)``
* observation trace: ``(n, nt+1, ntheta)`` on the outer circle
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from carleman_lab.errors import HypothesisViolation, NumericError, ParameterError, SolverError
from carleman_lab.geometry import GAMMA0, GAMMA1

log = logging.getLogger(__name__)

H5_FLOOR = 1e-8
FAN = np.linspace(0.0, np.pi, 16, endpoint=False)


def _sample(spec, lead, x1, x2):
    """Evaluate a coefficient given as callable(x1, x2) or as an array."""
    x1 = np.asarray(x1, dtype=float)
    v = np.asarray(spec(x1, x2) if callable(spec) else spec, dtype=float)
    if v.shape == lead:
        v = v.reshape(lead + (1,) * x1.ndim)
    return np.broadcast_to(v, lead + x1.shape)


@dataclass
class SystemCoefficients:
    """Coefficients of the operators of the system.

    ``diffusion``, ``drift`` and ``coupling`` are either arrays of shape
    ``(n, 2, 2)``, ``(n, 2)``, ``(n, n)`` or callables ``f(x1, x2)`` returning
    arrays of shape ``lead + x1.shape``. Entries are Cartesian.
    """

    n: int
    diffusion: object
    drift: object = None
    coupling: object = None
    mu: float = None

    def __post_init__(self):
        if self.n < 1:
            raise ParameterError("need at least one component")
        if self.drift is None:
            self.drift = np.zeros((self.n, 2))
        if self.coupling is None:
            self.coupling = np.zeros((self.n, self.n))

    @classmethod
    def constant(cls, a, b=None, c=None, mu=None):
        a = np.asarray(a, dtype=float)
        n = a.shape[0]
        return cls(n, a, None if b is None else np.asarray(b, float),
                   None if c is None else np.asarray(c, float), mu)

    def a(self, x1, x2):
        return _sample(self.diffusion, (self.n, 2, 2), x1, x2)

    def b(self, x1, x2):
        return _sample(self.drift, (self.n, 2), x1, x2)

    def c(self, x1, x2):
        return _sample(self.coupling, (self.n, self.n), x1, x2)

    def ellipticity(self, x1, x2):
        """Minimum of xi^T A_i xi over the 16-direction fan, per component and point."""
        a = self.a(x1, x2)
        xi = np.stack([np.cos(FAN), np.sin(FAN)])
        q = np.einsum("jf,ijk...,kf->if...", xi, a, xi)
        return q.min(axis=1)


def _boundary_array(v, n, ntheta):
    v = np.asarray(v, dtype=float)
    if v.ndim == 2:
        v = v[:, :, None]
    return np.broadcast_to(v, (n, 2, ntheta)).copy()


@dataclass
class BoundarySpec:
    """Robin data per component and circle: ``beta, eta`` of shape ``(n, 2[, ntheta])``.

    Index 0 of the second axis is the inner circle, index 1 the outer one. A
    circle with ``beta == 0`` and ``eta == 1`` is Dirichlet.
    """

    beta: object
    eta: object

    @classmethod
    def dirichlet(cls, n):
        return cls(np.zeros((n, 2)), np.ones((n, 2)))

    @classmethod
    def from_kinds(cls, kinds, robin=(1.0, 1.0)):
        """``kinds[i] = (inner, outer)`` with entries 'D', 'N' or 'R'."""
        table = {"D": (0.0, 1.0), "N": (1.0, 0.0), "R": robin}
        beta = [[table[k][0] for k in row] for row in kinds]
        eta = [[table[k][1] for k in row] for row in kinds]
        return cls(np.array(beta), np.array(eta))

    def on(self, n, ntheta):
        return _boundary_array(self.beta, n, ntheta), _boundary_array(self.eta, n, ntheta)

    def dirichlet_flags(self, n, ntheta):
        beta, eta = self.on(n, ntheta)
        return np.all(beta == 0, axis=2) & np.all(eta == 1, axis=2)


@dataclass
class ObservationSpec:
    """Observation coefficients on the outer circle, shape ``(n[, ntheta])``."""

    gamma: object
    delta: object

    @classmethod
    def normal_derivative(cls, n):
        return cls(np.ones(n), np.zeros(n))

    def on(self, n, ntheta):
        g = np.asarray(self.gamma, dtype=float)
        d = np.asarray(self.delta, dtype=float)
        if g.ndim == 1:
            g = g[:, None]
        if d.ndim == 1:
            d = d[:, None]
        return np.broadcast_to(g, (n, ntheta)).copy(), np.broadcast_to(d, (n, ntheta)).copy()


# hypotheses


@dataclass
class HypothesisResult:
    name: str
    passed: bool
    margin: float
    witness: tuple = None
    detail: str = ""


@dataclass
class HypothesisReport:
    results: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(r.passed for r in self.results.values())

    def __getitem__(self, name):
        return self.results[name]

    def failures(self):
        return [r for r in self.results.values() if not r.passed]

    def lines(self):
        out = []
        for r in self.results.values():
            status = "pass" if r.passed else "FAIL"
            out.append(f"{r.name}: {status} margin={r.margin:.6g} witness={r.witness} {r.detail}".rstrip())
        return out


def _check_h1(coeffs, grid):
    a = coeffs.a(grid.x1, grid.x2)
    if not np.all(np.isfinite(a)):
        return HypothesisResult("H1", False, -np.inf, None, "non-finite diffusion")
    q = coeffs.ellipticity(grid.x1, grid.x2)
    mu = coeffs.mu if coeffs.mu is not None else 0.0
    margin_field = q - mu
    idx = np.unravel_index(np.argmin(margin_field), margin_field.shape)
    margin = float(margin_field[idx])
    ok = margin >= 0 and float(q.min()) > 0
    if coeffs.mu is not None and coeffs.mu <= 0:
        ok = False
    return HypothesisResult("H1", ok, margin, tuple(int(v) for v in idx),
                            f"min xi^T A xi = {float(q.min()):.6g}")


def _check_h2(g):
    g = np.asarray(g)
    if not np.all(np.isfinite(g)):
        return HypothesisResult("H2", False, -np.inf, None, "non-finite source")
    idx = np.unravel_index(np.argmin(g), g.shape)
    margin = float(g[idx])
    return HypothesisResult("H2", margin >= 0, margin, tuple(int(v) for v in idx))


def _check_h3(coeffs, grid):
    c = np.array(coeffs.c(grid.x1, grid.x2))
    n = coeffs.n
    off = ~np.eye(n, dtype=bool)
    if not off.any():
        return HypothesisResult("H3", True, np.inf, None, "single component")
    vals = np.where(off[:, :, None, None], c, -np.inf)
    idx = np.unravel_index(np.argmax(vals), vals.shape)
    worst = float(vals[idx])
    return HypothesisResult("H3", worst <= 0, -worst, tuple(int(v) for v in idx))


def _check_h4(bspec, n, ntheta):
    beta, eta = bspec.on(n, ntheta)
    margin, witness, ok = np.inf, None, True
    for i in range(n):
        for comp in range(2):
            b, e = beta[i, comp], eta[i, comp]
            if np.all(b == 0) and np.all(e == 1):
                continue
            m = min(float(b.min()), float(e.min()) + 1.0)  # beta > 0, eta >= 0
            if not (np.all(b > 0) and np.all(e >= 0) and np.all(np.isfinite(b)) and np.all(np.isfinite(e))):
                ok = False
                m = min(float(b.min()), float(e.min()))
            if m < margin:
                margin, witness = m, (i, comp)
    return HypothesisResult("H4", ok, float(margin), witness)


def _check_h5(bspec, ospec, n, ntheta, floor):
    beta, eta = bspec.on(n, ntheta)
    gam, dlt = ospec.on(n, ntheta)
    det = gam * eta[:, 1] - dlt * beta[:, 1]
    mag = np.abs(det)
    idx = np.unravel_index(np.argmin(mag), mag.shape)
    margin = float(mag[idx]) - floor
    return HypothesisResult("H5", margin >= 0, margin, tuple(int(v) for v in idx),
                            f"det={float(det[idx]):.6g}")


def check_hypotheses(coeffs, bspec, ospec, grid, g=None, h5_floor=H5_FLOOR):
    """Pass/fail report for H1, H3, H4, H5 (and H2 when a source is given)."""
    rep = HypothesisReport()
    rep.results["H1"] = _check_h1(coeffs, grid)
    if g is not None:
        rep.results["H2"] = _check_h2(g)
    rep.results["H3"] = _check_h3(coeffs, grid)
    rep.results["H4"] = _check_h4(bspec, coeffs.n, grid.ntheta)
    if ospec is not None:
        rep.results["H5"] = _check_h5(bspec, ospec, coeffs.n, grid.ntheta, h5_floor)
    return rep


# discretization


def _polar_tensor(a, th):
    """Polar components (rr, rt, tr, tt) of Cartesian tensors at angle ``th``."""
    c, s = np.cos(th), np.sin(th)
    er = np.stack([c, s])
    et = np.stack([-s, c])
    a_rr = np.einsum("j...,ijk...,k...->i...", er, a, er)
    a_rt = np.einsum("j...,ijk...,k...->i...", er, a, et)
    a_tr = np.einsum("j...,ijk...,k...->i...", et, a, er)
    a_tt = np.einsum("j...,ijk...,k...->i...", et, a, et)
    return a_rr, a_rt, a_tr, a_tt


def _polar_vector(b, th):
    c, s = np.cos(th), np.sin(th)
    return b[:, 0] * c + b[:, 1] * s, -b[:, 0] * s + b[:, 1] * c


class _Stencil:
    """COO accumulator for one scalar operator on the ``(nr+1)*ntheta`` lattice."""

    def __init__(self, grid):
        self.grid = grid
        self.rows, self.cols, self.vals = [], [], []

    def idx(self, i, j):
        return i * self.grid.ntheta + np.mod(j, self.grid.ntheta)

    def add(self, row, col, val):
        row, col, val = np.broadcast_arrays(row, col, val)
        self.rows.append(row.ravel())
        self.cols.append(col.ravel())
        self.vals.append(val.ravel())

    def matrix(self, shape=None):
        n = self.grid.n_nodes
        shape = shape or (n, n)
        if not self.rows:
            return sp.csr_matrix(shape)
        return sp.csr_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=shape,
        )


def _radial_derivative_stencil(grid, i):
    """(offsets, coefficients) of a second-order d/dr at radial row ``i``."""
    h = grid.dr
    if i == 0:
        return (0, 1, 2), (-1.5 / h, 2.0 / h, -0.5 / h)
    if i == grid.nr:
        return (0, -1, -2), (1.5 / h, -2.0 / h, 0.5 / h)
    return (-1, 1), (-0.5 / h, 0.5 / h)


def _diffusion_operator(grid, a_fn, robin_ratio):
    """Finite-volume matrix of -div(A grad y) with conormal Robin faces.

    ``a_fn(x1, x2)`` returns the (2, 2, ...) tensor of one component;
    ``robin_ratio[comp]`` is eta/beta per boundary node, or None on Dirichlet
    circles.
    """
    st = _Stencil(grid)
    nr, nt_ = grid.nr, grid.ntheta
    dr, dth = grid.dr, grid.dtheta
    j = np.arange(nt_)

    # radial faces r_{i+1/2}
    i = np.arange(nr)[:, None]
    rf = grid.r0 + (i + 0.5) * dr
    thf = np.broadcast_to(grid.theta[None, :], (nr, nt_))
    rfb = np.broadcast_to(rf, (nr, nt_))
    a = a_fn(rfb * np.cos(thf), rfb * np.sin(thf))
    a_rr, a_rt, _, _ = _polar_tensor(a[None], thf)
    a_rr, a_rt = a_rr[0], a_rt[0]
    length = rfb * dth
    jj = j[None, :]
    # F_r * length as stencil on y
    flux = [
        (i + 1, jj, a_rr / dr),
        (i, jj, -a_rr / dr),
        (i, jj + 1, a_rt / (rfb * 4 * dth)),
        (i + 1, jj + 1, a_rt / (rfb * 4 * dth)),
        (i, jj - 1, -a_rt / (rfb * 4 * dth)),
        (i + 1, jj - 1, -a_rt / (rfb * 4 * dth)),
    ]
    for ci, cj, coef in flux:
        col = st.idx(np.broadcast_to(ci, (nr, nt_)), cj)
        st.add(st.idx(i, jj), col, -coef * length)  # outward +e_r for inner node
        st.add(st.idx(i + 1, jj), col, coef * length)  # outward -e_r for outer node

    # angular faces theta_{j+1/2} on every row; half length on the circles
    for ir in range(nr + 1):
        if ir == 0:
            rc, flen = grid.r0 + 0.25 * dr, 0.5 * dr
        elif ir == nr:
            rc, flen = grid.r1 - 0.25 * dr, 0.5 * dr
        else:
            rc, flen = grid.r[ir], dr
        thh = grid.theta + 0.5 * dth
        a = a_fn(rc * np.cos(thh), rc * np.sin(thh))
        _, _, a_tr, a_tt = _polar_tensor(a[None], thh)
        a_tr, a_tt = a_tr[0], a_tt[0]
        if ir == 0:
            offs, cs = (0, 1), (-1.0 / dr, 1.0 / dr)
        elif ir == nr:
            offs, cs = (-1, 0), (-1.0 / dr, 1.0 / dr)
        else:
            offs, cs = (-1, 1), (-0.5 / dr, 0.5 / dr)
        flux = [(ir, j + 1, a_tt / (rc * dth)), (ir, j, -a_tt / (rc * dth))]
        for o, cf in zip(offs, cs):
            flux.append((ir + o, j, 0.5 * a_tr * cf))
            flux.append((ir + o, j + 1, 0.5 * a_tr * cf))
        for ci, cj, coef in flux:
            col = st.idx(np.full(nt_, ci), cj)
            st.add(st.idx(np.full(nt_, ir), j), col, -coef * flen)
            st.add(st.idx(np.full(nt_, ir), j + 1), col, coef * flen)

    # boundary faces: -(A grad y . nu) |face| = (eta/beta) y |face|
    for comp, ir in ((GAMMA0, 0), (GAMMA1, nr)):
        ratio = robin_ratio[comp]
        if ratio is None:
            continue
        rows = st.idx(np.full(nt_, ir), j)
        st.add(rows, rows, ratio * grid.r[ir] * dth)
    return st.matrix()


def _drift_operator(grid, b_r, b_t):
    """Node-wise b_r dy/dr + b_t (1/r) dy/dtheta, scaled later by the mass."""
    st = _Stencil(grid)
    j = np.arange(grid.ntheta)
    for ir in range(grid.nr + 1):
        rows = st.idx(np.full(grid.ntheta, ir), j)
        offs, cs = _radial_derivative_stencil(grid, ir)
        for o, cf in zip(offs, cs):
            st.add(rows, st.idx(np.full(grid.ntheta, ir + o), j), b_r[ir] * cf)
        k = b_t[ir] / (grid.r[ir] * 2 * grid.dtheta)
        st.add(rows, st.idx(np.full(grid.ntheta, ir), j + 1), k)
        st.add(rows, st.idx(np.full(grid.ntheta, ir), j - 1), -k)
    return st.matrix()


def _conormal_operator(grid, a_nodes, comp):
    """Rows mapping y (one component) to dy/dn_A on circle ``comp``.

    ``a_nodes`` is the (2, 2, nr+1, ntheta) tensor at the nodes. Uses a
    one-sided second-order radial difference and a centred angular one.
    """
    ir = grid.boundary_row(comp)
    sign = 1.0 if comp == GAMMA1 else -1.0
    th = grid.theta
    a_rr, a_rt, _, _ = _polar_tensor(a_nodes[None, :, :, ir, :], th)
    a_rr, a_rt = a_rr[0], a_rt[0]
    n = grid.ntheta
    st = _Stencil(grid)
    j = np.arange(n)
    offs, cs = _radial_derivative_stencil(grid, ir)
    for o, cf in zip(offs, cs):
        st.add(j, st.idx(np.full(n, ir + o), j), sign * a_rr * cf)
    k = sign * a_rt / (grid.r[ir] * 2 * grid.dtheta)
    st.add(j, st.idx(np.full(n, ir), j + 1), k)
    st.add(j, st.idx(np.full(n, ir), j - 1), -k)
    return st.matrix(shape=(n, grid.n_nodes))


class Problem:
    """Assembled forward problem: solver, observation, forward map and its adjoint.

    The step matrices depend only on the grid and the (time-independent)
    coefficients and are factored once.
    """

    def __init__(self, grid, coeffs, bspec, ospec=None, theta=1.0, validate=True):
        if not 0.5 <= theta <= 1.0:
            raise ParameterError(f"theta must lie in [0.5, 1], got {theta}")
        self.grid, self.coeffs, self.bspec, self.ospec = grid, coeffs, bspec, ospec
        self.theta = float(theta)
        self.n = coeffs.n
        self.report = check_hypotheses(coeffs, bspec, ospec, grid)
        if validate:
            bad = [r for r in self.report.failures() if r.name in ("H1", "H3", "H4")]
            if bad:
                raise HypothesisViolation("; ".join(f"{r.name} fails at {r.witness}" for r in bad))
        self._assemble()
        self._factor()

    # assembly

    def _assemble(self):
        grid, n, N = self.grid, self.n, self.grid.n_nodes
        beta, eta = self.bspec.on(n, grid.ntheta)
        self.dirichlet = self.bspec.dirichlet_flags(n, grid.ntheta)
        vol = grid.space_weights.ravel()
        x1, x2 = grid.x1, grid.x2
        b_r, b_t = _polar_vector(self.coeffs.b(x1, x2), grid.tt)
        c = self.coeffs.c(x1, x2)
        a_nodes = self.coeffs.a(x1, x2)

        blocks = [[None] * n for _ in range(n)]
        self.conormal_ops = {GAMMA0: [], GAMMA1: []}
        for i in range(n):
            ratio = {}
            for comp, k in ((GAMMA0, 0), (GAMMA1, 1)):
                ratio[comp] = None if self.dirichlet[i, k] else eta[i, k] / beta[i, k]
            a_fn = lambda X1, X2, i=i: self.coeffs.a(X1, X2)[i]
            Ki = _diffusion_operator(grid, a_fn, ratio)
            Ki = Ki + sp.diags(vol) @ _drift_operator(grid, b_r[i], b_t[i])
            for l in range(n):
                cil = sp.diags(vol * c[i, l].ravel())
                blocks[i][l] = (Ki + cil) if l == i else cil
            for comp in (GAMMA0, GAMMA1):
                self.conormal_ops[comp].append(_conormal_operator(grid, a_nodes[i], comp))
        self.K = sp.bmat(blocks, format="csr")
        self.mass = np.tile(vol, n)

        free = np.ones((n, grid.nr + 1, grid.ntheta), dtype=bool)
        for i in range(n):
            if self.dirichlet[i, 0]:
                free[i, 0, :] = False
            if self.dirichlet[i, 1]:
                free[i, -1, :] = False
        self.free = free.ravel()
        D = sp.diags(self.free.astype(float))
        Dc = sp.diags((~self.free).astype(float))
        dt, th = grid.dt, self.theta
        M = sp.diags(self.mass)
        # Dirichlet columns are dropped too (those unknowns vanish for k >= 1),
        # which decouples the identity rows so they solve to exact zeros
        self.S = (D @ (M + th * dt * self.K) @ D + Dc).tocsc()
        self.R = (D @ (M - (1 - th) * dt * self.K)).tocsr()
        self.B = self.mass * self.free  # diagonal of D M

        if self.ospec is not None:
            gam, dlt = self.ospec.on(n, grid.ntheta)
            rows = []
            for i in range(n):
                Ci = self.conormal_ops[GAMMA1][i]
                trace = sp.csr_matrix(
                    (np.ones(grid.ntheta), (np.arange(grid.ntheta), grid.nr * grid.ntheta + np.arange(grid.ntheta))),
                    shape=(grid.ntheta, N),
                )
                rows.append(sp.diags(gam[i]) @ Ci + sp.diags(dlt[i]) @ trace)
            self.O = sp.block_diag(rows, format="csr")
        else:
            self.O = None

    def _factor(self):
        try:
            self.lu = spla.splu(self.S)
        except RuntimeError as exc:
            raise SolverError(f"step matrix is singular: {exc}", condition_estimate=np.inf) from exc
        if not np.all(np.isfinite(self.lu.U.data)):
            raise SolverError("non-finite LU factor", condition_estimate=np.inf)

    def condition_estimate(self):
        """1-norm condition estimate of the step matrix."""
        n = self.S.shape[0]
        inv = spla.LinearOperator((n, n), matvec=self.lu.solve,
                                  rmatvec=lambda v: self.lu.solve(v, trans="T"))
        return float(spla.onenormest(self.S) * spla.onenormest(inv))

    # fields

    @property
    def field_shape(self):
        return (self.n,) + self.grid.shape

    @property
    def trace_shape(self):
        return (self.n, self.grid.nt + 1, self.grid.ntheta)

    def zeros(self):
        return np.zeros(self.field_shape)

    def _flat(self, u):
        return np.asarray(u, dtype=float).reshape(self.n, self.grid.nt + 1, -1)

    # solver

    def _step_rhs(self, y_prev, g_prev, g_next):
        dt, th = self.grid.dt, self.theta
        src = th * g_next + (1 - th) * g_prev
        return self.R @ y_prev + dt * self.B * src

    def solve(self, g, y0=None, check_residual=True, rtol=1e-10):
        """Time-march the system. ``g`` has the field shape, ``y0`` the spatial one."""
        g = np.asarray(g, dtype=float)
        if g.shape != self.field_shape:
            raise ParameterError(f"source shape {g.shape} != {self.field_shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite source")
        h2 = _check_h2(g)
        if not h2.passed:
            log.debug("source violates H2 (min %.3g); solving anyway", h2.margin)
        nt = self.grid.nt
        gf = g.reshape(self.n, nt + 1, -1).transpose(1, 0, 2).reshape(nt + 1, -1)
        y = np.zeros((nt + 1, gf.shape[1]))
        if y0 is not None:
            y[0] = np.asarray(y0, dtype=float).reshape(-1)
            if not np.all(np.isfinite(y[0])):
                raise NumericError("non-finite initial data")
        for k in range(nt):
            rhs = self._step_rhs(y[k], gf[k], gf[k + 1])
            y[k + 1] = self.lu.solve(rhs)
            if not np.all(np.isfinite(y[k + 1])):
                raise NumericError(f"non-finite solution at step {k + 1}")
            if check_residual:
                res = np.linalg.norm(self.S @ y[k + 1] - rhs)
                scale = np.linalg.norm(rhs)
                if res > rtol * max(scale, np.finfo(float).tiny):
                    if scale == 0 and res < 1e-300:
                        continue
                    raise SolverError(
                        f"step {k + 1}: relative residual {res / max(scale, 1e-300):.3e}",
                        condition_estimate=self.condition_estimate(),
                    )
        return y.reshape(nt + 1, self.n, -1).transpose(1, 0, 2).reshape(self.field_shape)

    def residual(self, y, g, y0=None):
        """Maximum relative residual of the discrete equations over all steps."""
        nt = self.grid.nt
        yf = np.asarray(y).reshape(self.n, nt + 1, -1).transpose(1, 0, 2).reshape(nt + 1, -1)
        gf = np.asarray(g).reshape(self.n, nt + 1, -1).transpose(1, 0, 2).reshape(nt + 1, -1)
        worst = 0.0
        if y0 is not None:
            worst = np.linalg.norm(yf[0] - np.ravel(y0)) / max(np.linalg.norm(np.ravel(y0)), 1e-300)
        for k in range(nt):
            rhs = self._step_rhs(yf[k], gf[k], gf[k + 1])
            lhs = self.S @ yf[k + 1]
            scale = np.linalg.norm(rhs) + np.linalg.norm(lhs)
            if scale > 0:
                worst = max(worst, np.linalg.norm(lhs - rhs) / scale)
        return float(worst)

    # boundary quantities

    def conormal(self, y, comp=GAMMA1):
        """dy_i/dn_A on circle ``comp`` at every time level, shape (n, nt+1, ntheta)."""
        yf = self._flat(y)
        ops = self.conormal_ops[comp]
        return np.stack([(ops[i] @ yf[i].T).T for i in range(self.n)])

    def boundary_residual(self, y, comp):
        """|beta dy/dn_A + eta y| on circle ``comp``, shape (n, nt+1, ntheta)."""
        beta, eta = self.bspec.on(self.n, self.grid.ntheta)
        k = 0 if comp == GAMMA0 else 1
        ir = self.grid.boundary_row(comp)
        yb = np.asarray(y)[:, :, ir, :]
        dn = self.conormal(y, comp)
        return np.abs(beta[:, k][:, None, :] * dn + eta[:, k][:, None, :] * yb)

    def observe(self, y):
        if self.O is None:
            raise ParameterError("problem has no observation operator")
        yf = self._flat(y)
        nt = self.grid.nt
        z = (self.O @ yf.transpose(1, 0, 2).reshape(nt + 1, -1).T).T
        return z.reshape(nt + 1, self.n, -1).transpose(1, 0, 2)

    # inverse-problem maps

    def forward_map(self, g):
        """Source to observation with zero initial data."""
        return self.observe(self.solve(g))

    def adjoint_map(self, w):
        """Adjoint of ``forward_map`` in the L2(Sigma1) / L2(Q) quadrature inner products."""
        grid, n, nt = self.grid, self.n, self.grid.nt
        w = np.asarray(w, dtype=float)
        if w.shape != self.trace_shape:
            raise ParameterError(f"trace shape {w.shape} != {self.trace_shape}")
        ws = w * grid.boundary_weights(GAMMA1)[None]
        v = ws.transpose(1, 0, 2).reshape(nt + 1, -1)
        u = (self.O.T @ v.T).T  # (nt+1, n*N)
        dt, th = grid.dt, self.theta
        nu = np.zeros_like(u)  # nu[k] = S^{-T} mu[k], k >= 1
        mu = u[nt]
        for k in range(nt, 0, -1):
            nu[k] = self.lu.solve(mu, trans="T")
            mu = u[k - 1] + self.R.T @ nu[k]
        gt = np.zeros_like(u)
        gt[1:] += th * nu[1:]
        gt[:-1] += (1 - th) * nu[1:]
        gt *= dt * self.B
        out = gt.reshape(nt + 1, n, -1).transpose(1, 0, 2).reshape(self.field_shape)
        wq = grid.volume_weights[None]
        return out / wq

    def inner_Q(self, a, b):
        return float(np.sum(self.grid.volume_weights[None] * a * b))

    def inner_Sigma1(self, a, b):
        return float(np.sum(self.grid.boundary_weights(GAMMA1)[None] * a * b))


def solve(coeffs, bspec, g, y0, grid, theta=1.0):
    return Problem(grid, coeffs, bspec, theta=theta).solve(g, y0)


def observe(y, coeffs, ospec, grid, bspec=None):
    bspec = bspec if bspec is not None else BoundarySpec.dirichlet(coeffs.n)
    return Problem(grid, coeffs, bspec, ospec, validate=False).observe(y)


def conormal_derivative(y, coeffs, grid, node, time):
    """dy_i/dn_A at boundary node ``(i, j)`` and time index ``time`` for every component.

    ``y`` may be a single spatial field ``(nr+1, ntheta)`` with ``time=None``.
    """
    from carleman_lab.errors import DomainError

    ir, jj = node
    if ir not in (0, grid.nr):
        raise DomainError(f"node {node} is interior")
    comp = GAMMA0 if ir == 0 else GAMMA1
    y = np.asarray(y, dtype=float)
    a_nodes = coeffs.a(grid.x1, grid.x2)
    if y.ndim == 2:
        y = np.broadcast_to(y, (coeffs.n,) + y.shape)
    elif y.ndim == 4:
        y = y[:, time]
    out = []
    for i in range(coeffs.n):
        op = _conormal_operator(grid, a_nodes[i], comp)
        out.append(float(np.ravel(op[jj % grid.ntheta] @ y[i].ravel())[0]))
    return out[0] if coeffs.n == 1 else np.array(out)
