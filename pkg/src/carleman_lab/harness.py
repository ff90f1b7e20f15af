"""LHS/RHS ratio experiments for the L2 and L^q Carleman inequalities and the
source stability bound.

Every term is computed as a natural logarithm so that weights such as
``exp(2 s alpha)``, which underflow in double precision for most parameter
sets, never need to be formed. Ratios are reported both as ``log_ratio`` and
as a float (possibly 0.0 after underflow).
"""

import datetime as _dt
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from carleman_lab import norms
from carleman_lab.errors import ParameterError
from carleman_lab.weights import weight_field

log = logging.getLogger(__name__)

L2_LHS = ("Q_dt", "Q_d2", "Q_d1", "Q_0", "Sigma0")
L2_RHS = ("Q_g", "Sigma1")
LQ_LHS = ("y", "Dy", "D2y", "Dty")
LQ_RHS = ("g", "zeta")


def _lse(values):
    return norms._logsumexp(np.asarray(list(values), dtype=float))


def _safe_exp(v):
    if v == -np.inf or v < -745:
        return 0.0
    if v > 709:
        return np.inf
    return math.exp(v)


@dataclass
class CarlemanReport:
    kind: str
    params: object
    q: float
    log_lhs_terms: dict
    log_rhs_terms: dict
    grid_signature: str
    diagnostics: dict = field(default_factory=dict)
    unconverged: bool = False
    refinement: dict = field(default_factory=dict)
    timestamp: str = field(default_factory=lambda: _dt.datetime.now(_dt.timezone.utc).isoformat())

    @property
    def log_lhs(self):
        return _lse(self.log_lhs_terms.values())

    @property
    def log_rhs(self):
        return _lse(self.log_rhs_terms.values())

    @property
    def anomaly(self):
        """Zero right-hand side under a nonzero left-hand side contradicts the estimate."""
        return self.log_rhs == -np.inf and self.log_lhs > -np.inf

    @property
    def log_ratio(self):
        if self.log_lhs == -np.inf:
            return -np.inf
        if self.log_rhs == -np.inf:
            return np.inf
        return self.log_lhs - self.log_rhs

    @property
    def ratio(self):
        return _safe_exp(self.log_ratio)

    @property
    def lhs_terms(self):
        return {k: _safe_exp(v) for k, v in self.log_lhs_terms.items()}

    @property
    def rhs_terms(self):
        return {k: _safe_exp(v) for k, v in self.log_rhs_terms.items()}


def _interior_mask(grid):
    m = np.ones(grid.nt + 1, dtype=bool)
    m[[0, -1]] = False
    return m


def _log_abs_sq(f, grid_ndim):
    a = norms.pointwise_abs(f, grid_ndim)
    with np.errstate(divide="ignore"):
        return 2 * np.log(a)


def _check_solution(problem, y, g, tol):
    if problem is None:
        return None
    res = problem.residual(y, g, y0=np.asarray(y)[:, 0])
    if res > tol:
        raise ParameterError(f"y does not solve the system for g: residual {res:.3e} > {tol:.1e}")
    return res


def verify_l2_carleman(y, g, zeta, params, grid, problem=None, residual_tol=1e-8, derivs=None):
    """Seven weighted integrals of the L2 Carleman estimate, in logs.

    LHS: int_Q [(s phi)^-1 (|D_t y|^2 + |D^2 y|^2) + s lam^2 phi |Dy|^2
    + s^3 lam^4 phi^3 |y|^2] e^{2 s alpha} plus int_{Sigma0} s^3 lam^3 phi^3 |y|^2 e^{2 s alpha};
    RHS: int_Q |g|^2 e^{2 s alpha} + int_{Sigma1} s^3 lam^3 phi^3 |zeta|^2 e^{2 s alpha}.
    """
    res = _check_solution(problem, y, g, residual_tol)
    s, lam = params.s, params.lam
    ls, ll = math.log(s), math.log(lam)
    inner = _interior_mask(grid)
    lphi = np.log(weight_field("phi", grid, params).values)
    e2 = 2 * s * weight_field("alpha", grid, params).values
    d = derivs if derivs is not None else norms.derivative_fields(y, grid)

    def q_term(f, coef_log):
        integrand = np.full(grid.shape, -np.inf)
        integrand[inner] = coef_log + _log_abs_sq(f, 3)[inner] + e2
        return norms.log_integral(integrand, grid, "Q")

    def s_term(f, row, measure):
        integrand = np.full((grid.nt + 1, grid.ntheta), -np.inf)
        integrand[inner] = 3 * ls + 3 * ll + 3 * lphi[:, row] + _log_abs_sq(f, 2)[inner] + e2[:, row]
        return norms.log_integral(integrand, grid, measure)

    y = np.asarray(y)
    lhs = {
        "Q_dt": q_term(d["Dty"], -ls - lphi),
        "Q_d2": q_term(d["D2y"], -ls - lphi),
        "Q_d1": q_term(d["Dy"], ls + 2 * ll + lphi),
        "Q_0": q_term(y, 3 * ls + 4 * ll + 3 * lphi),
        "Sigma0": s_term(y[:, :, 0, :], 0, "Sigma0"),
    }
    rhs = {
        "Q_g": q_term(g, 0.0),
        "Sigma1": s_term(zeta, -1, "Sigma1"),
    }
    diag = {} if res is None else {"residual": res}
    rep = CarlemanReport("l2", params, 2, lhs, rhs, grid.signature(), diag)
    if rep.anomaly:
        log.warning("L2 Carleman anomaly: zero RHS with nonzero LHS on %s", grid.signature())
    return rep


def verify_lq_carleman(y, g, zeta, params, q, grid, problem=None, residual_tol=1e-8, derivs=None):
    """Norms of the L^q Carleman estimate, in logs.

    LHS: ||y e^{s' alpha}||_q + ||Dy e^{s' alpha}||_q + ||D^2y e^{s' alpha}||_q
    + ||D_t y e^{s' alpha}||_q; RHS: ||g e^{s alpha}||_q + ||zeta e^{s alpha}||_{L2(Sigma1)}.
    The phi^3-weighted boundary variant is reported under ``diagnostics``.
    """
    res = _check_solution(problem, y, g, residual_tol)
    s, sp_, lam = params.s, params.s_prime, params.lam
    d = derivs if derivs is not None else norms.derivative_fields(y, grid)
    alpha = weight_field("alpha", grid, params).full()
    e_sp = sp_ * alpha
    e_s = s * alpha
    lhs = {
        "y": norms.log_lq_norm(y, grid, q, e_sp),
        "Dy": norms.log_lq_norm(d["Dy"], grid, q, e_sp),
        "D2y": norms.log_lq_norm(d["D2y"], grid, q, e_sp),
        "Dty": norms.log_lq_norm(d["Dty"], grid, q, e_sp),
    }
    e_b = e_s[:, -1, :]
    rhs = {
        "g": norms.log_lq_norm(g, grid, q, e_s),
        "zeta": norms.log_lq_norm(zeta, grid, 2, e_b, "Sigma1"),
    }
    lphi_b = np.log(weight_field("phi", grid, params).values[:, -1, :])
    mult = np.full_like(e_b, -np.inf)
    mult[1:-1] = e_b[1:-1] + 1.5 * (math.log(s) + math.log(lam) + lphi_b)
    diag = {"zeta_phi3": norms.log_lq_norm(zeta, grid, 2, mult, "Sigma1")}
    if res is not None:
        diag["residual"] = res
    rep = CarlemanReport("lq", params, q, lhs, rhs, grid.signature(), diag)
    if rep.anomaly:
        log.warning("L^q Carleman anomaly: zero RHS with nonzero LHS on %s", grid.signature())
    return rep


def refinement_check(coarse, fine, rtol=0.10, negligible=1e-12):
    """Compare every term of two reports; terms below ``negligible`` of their
    side's total at both resolutions are skipped."""
    changes = {}
    ok = True
    for side in ("log_lhs_terms", "log_rhs_terms"):
        a, b = getattr(coarse, side), getattr(fine, side)
        tot_a = _lse(a.values())
        tot_b = _lse(b.values())
        for k in a:
            small_a = a[k] == -np.inf or a[k] - tot_a < math.log(negligible)
            small_b = b[k] == -np.inf or b[k] - tot_b < math.log(negligible)
            if small_a and small_b:
                changes[k] = 0.0
                continue
            if a[k] == -np.inf or b[k] == -np.inf:
                changes[k] = np.inf
                ok = False
                continue
            rel = abs(math.expm1(b[k] - a[k]))
            changes[k] = rel
            ok &= rel <= rtol
    return ok, changes


def run_cell(kind, params, q, grid, make_problem, make_source, refine=True, rtol=0.10):
    """One (params, q, source) cell at ``grid``, optionally checked against the
    doubled grid. ``make_problem(grid)`` returns a Problem with an
    observation; ``make_source(grid)`` returns ``(g, y0)``."""

    def report_on(gr):
        prob = make_problem(gr)
        g, y0 = make_source(gr)
        y = prob.solve(g, y0)
        zeta = prob.observe(y)
        if kind == "l2":
            return verify_l2_carleman(y, g, zeta, params, gr, problem=prob)
        return verify_lq_carleman(y, g, zeta, params, q, gr, problem=prob)

    rep = report_on(grid)
    if refine:
        fine = report_on(grid.refined())
        ok, changes = refinement_check(rep, fine, rtol)
        rep.unconverged = not ok
        rep.refinement = changes
        rep.diagnostics["log_ratio_fine"] = fine.log_ratio
    return rep


@dataclass
class StabilityTable:
    ratios: np.ndarray
    norms_g: np.ndarray
    norms_zeta: np.ndarray
    flagged: list
    anomalies: list

    @property
    def max(self):
        return float(np.max(self.ratios))

    @property
    def median(self):
        return float(np.median(self.ratios))


def estimate_stability_constant(samples, problem, class_spec, q=None, pathology_factor=10.0):
    """Empirical ``||g||_q / ||zeta||_{L2(Sigma1)}`` over class members, y0 = 0."""
    from carleman_lab.inverse import class_membership

    q = class_spec.q if q is None else q
    grid = problem.grid
    ng, nz = [], []
    anomalies = []
    for k, g in enumerate(samples):
        mem = class_membership(g, class_spec, grid)
        if not mem.member:
            raise ParameterError(f"sample {k} is not in the source class (margin {mem.margin:.3g})")
        zeta = problem.forward_map(g)
        a = norms.lq_norm(g, grid, q)
        b = norms.lq_norm(zeta, grid, 2, "Sigma1")
        if b == 0 or b < 1e-300 * max(a, 1.0):
            anomalies.append(k)
            log.warning("sample %d: zero observation for a nonzero source", k)
        ng.append(a)
        nz.append(b)
    ng, nz = np.array(ng), np.array(nz)
    with np.errstate(divide="ignore"):
        ratios = ng / nz
    finite = ratios[np.isfinite(ratios)]
    med = np.median(finite) if finite.size else np.inf
    flagged = [k for k, r in enumerate(ratios) if r > pathology_factor * med]
    return StabilityTable(ratios, ng, nz, flagged, anomalies)
