"""Source class, source sampling and Tikhonov reconstruction from boundary data.

The forward map ``F: g -> zeta`` (zero initial data) and its adjoint come from
:class:`carleman_lab.forward.Problem`. Reconstruction minimizes

    ||F g - zeta_obs||^2_{L2(Sigma1)} + rho ||g||^2_{L2(Q)}

by conjugate gradients on the normal equations, either over the full grid
field or over the span of a :class:`SourceBasis`.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from carleman_lab import norms
from carleman_lab.errors import HypothesisViolation, ParameterError, SamplingError

log = logging.getLogger(__name__)


@dataclass
class SourceClassSpec:
    """Nonnegative sources g with int_Q g . g~ >= delta_tilde ||g||_q for some g~ in G_tilde."""

    q: float
    delta_tilde: float
    G_tilde: list

    def __post_init__(self):
        if not self.q >= 2:
            raise ParameterError(f"need q >= 2, got {self.q}")
        if not self.delta_tilde > 0:
            raise ParameterError(f"need delta_tilde > 0, got {self.delta_tilde}")
        if len(self.G_tilde) == 0:
            raise ParameterError("G_tilde must be nonempty")
        self.G_tilde = [np.asarray(gt, dtype=float) for gt in self.G_tilde]
        for k, gt in enumerate(self.G_tilde):
            if not np.any(gt != 0):
                raise ParameterError(f"G_tilde[{k}] is zero")

    @property
    def q_conjugate(self):
        return norms.conjugate(self.q)


@dataclass
class Membership:
    member: bool
    witness: int
    margin: float
    pairings: list = field(default_factory=list)


def ones_dual(n, grid):
    return np.ones((n,) + grid.shape)


def pairing(g, h, grid):
    return float(np.sum(grid.volume_weights[None] * np.asarray(g) * np.asarray(h)))


def class_membership(g, spec, grid):
    g = np.asarray(g, dtype=float)
    if not np.all(np.isfinite(g)):
        raise ParameterError("non-finite source")
    if np.any(g < 0):
        raise HypothesisViolation(f"H2: source has negative entries (min {g.min():.3g})")
    if not np.any(g > 0):
        # the zero source is excluded; the stability ratio is vacuous there
        return Membership(False, None, 0.0, [0.0] * len(spec.G_tilde))
    gq = norms.lq_norm(g, grid, spec.q)
    prs = [pairing(g, gt, grid) for gt in spec.G_tilde]
    margins = [p - spec.delta_tilde * gq for p in prs]
    k = int(np.argmax(margins))
    return Membership(margins[k] >= 0, k if margins[k] >= 0 else None, float(margins[k]), prs)


# sampling


def _bump(grid, center_r, center_th, width):
    cx, cy = center_r * math.cos(center_th), center_r * math.sin(center_th)
    d2 = (grid.x1 - cx) ** 2 + (grid.x2 - cy) ** 2
    return np.exp(-d2 / (2 * width**2))


def random_bumps(grid, n, rng, n_bumps=None):
    """Nonnegative smooth source: 1-4 Gaussian bumps with smooth time profiles."""
    nb = int(rng.integers(1, 5)) if n_bumps is None else n_bumps
    L = grid.r1 - grid.r0
    g = np.zeros((n,) + grid.shape)
    tau = grid.t / grid.T
    for _ in range(nb):
        rc = grid.r0 + L * rng.uniform(0.25, 0.75)
        thc = rng.uniform(0, 2 * np.pi)
        w = L * rng.uniform(0.15, 0.3)
        amp = rng.uniform(0.0, 1.0, size=n)
        amp[rng.integers(n)] += 0.5
        a, f, ph = rng.uniform(0, 0.5), rng.uniform(0.5, 2.0), rng.uniform(0, 2 * np.pi)
        prof = 1 + a * np.sin(2 * np.pi * f * tau + ph)
        space = _bump(grid, rc, thc, w)
        g += amp[:, None, None, None] * prof[None, :, None, None] * space[None, None]
    return g


def sample_source(spec, grid, seed, n=None, basis=None, max_attempts=100):
    """Draw a class member: random bumps, or 1-4 nonnegative basis elements."""
    n = spec.G_tilde[0].shape[0] if n is None else n
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        if basis is None:
            g = random_bumps(grid, n, rng)
        else:
            g = basis.synth(basis.random_coefficients(rng))
        if class_membership(g, spec, grid).member:
            return g
    raise SamplingError(f"no class member after {max_attempts} attempts (seed {seed})")


def calibrate_delta_tilde(G_tilde, grid, q, seeds, n, factor=0.5, basis=None):
    """``factor`` times the smallest pairing-to-norm ratio over initial samples."""
    vals = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        g = random_bumps(grid, n, rng) if basis is None else basis.synth(basis.random_coefficients(rng))
        gq = norms.lq_norm(g, grid, q)
        vals.append(max(pairing(g, gt, grid) for gt in G_tilde) / gq)
    return factor * min(vals)


@dataclass
class SourceBasis:
    """Finite set of nonnegative source fields, shape ``(k, n, nt+1, nr+1, ntheta)``."""

    elements: np.ndarray
    labels: list = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def size(self):
        return self.elements.shape[0]

    def synth(self, c):
        return np.tensordot(np.asarray(c, dtype=float), self.elements, axes=1)

    def analysis(self, h):
        """Transpose of ``synth`` for the Euclidean pairing of fields."""
        return np.tensordot(self.elements, h, axes=h.ndim)

    def images(self, problem):
        """Observations ``F b_k`` of every element and the Q-Gram matrix, once per problem."""
        key = id(problem)
        if key not in self._cache:
            G = np.stack([problem.forward_map(e) for e in self.elements])
            wq = problem.grid.volume_weights[None]
            flat = self.elements.reshape(self.size, -1)
            gram = flat @ (wq * self.elements).reshape(self.size, -1).T
            self._cache = {key: (G, gram)}
        return self._cache[key]

    def random_coefficients(self, rng, max_active=4):
        k = int(rng.integers(1, max_active + 1))
        c = np.zeros(self.size)
        idx = rng.choice(self.size, size=k, replace=False)
        c[idx] = rng.uniform(0.5, 1.5, size=k)
        return c


def bump_basis(grid, n, radii=None, n_angles=6, width=None, n_time=3):
    """Gaussian bumps on a polar lattice times piecewise-linear time hats, per component."""
    L = grid.r1 - grid.r0
    radii = [grid.r0 + 0.35 * L, grid.r0 + 0.7 * L] if radii is None else radii
    width = 0.18 * L if width is None else width
    tau = grid.t / grid.T
    nodes = np.linspace(0, 1, n_time)
    h = nodes[1] - nodes[0]
    hats = [np.clip(1 - np.abs(tau - z) / h, 0, None) for z in nodes]
    elems, labels = [], []
    for i in range(n):
        for rc in radii:
            for a in range(n_angles):
                th = 2 * np.pi * (a + 0.5 * (radii.index(rc) % 2)) / n_angles
                space = _bump(grid, rc, th, width)
                for z, hat in zip(nodes, hats):
                    e = np.zeros((n,) + grid.shape)
                    e[i] = hat[:, None, None] * space[None]
                    elems.append(e)
                    labels.append((i, rc, th, z))
    return SourceBasis(np.stack(elems), labels)


# reconstruction


@dataclass
class ReconstructionResult:
    g_hat: np.ndarray
    residual_norm: float
    rho: float
    iterations: int
    converged: bool
    relative_error: float = None
    objective: list = field(default_factory=list)
    coefficients: np.ndarray = None


class _NormalEquations:
    """(F*F + rho I) x = F* zeta in the unknowns of a basis or of the grid."""

    def __init__(self, problem, rho, basis=None):
        self.p, self.rho, self.basis = problem, rho, basis
        self.wq = problem.grid.volume_weights[None]
        if basis is not None:
            # assembled from the element images; equal to the matrix-free form
            # because F* is the exact discrete adjoint
            G, gram = basis.images(problem)
            ws = np.broadcast_to(problem.grid.boundary_weights(2)[None], G.shape[1:])
            self.G = G.reshape(basis.size, -1)
            self.Gw = self.G * ws.reshape(-1)
            self.A = self.Gw @ self.G.T + rho * gram

    def to_field(self, x):
        return x if self.basis is None else self.basis.synth(x)

    def _pull(self, h):
        # h is a Q-field gradient representative; map to unknown space
        if self.basis is None:
            return h
        return self.basis.analysis(self.wq * h)

    def apply(self, x):
        if self.basis is not None:
            return self.A @ x
        g = self.to_field(x)
        return self._pull(self.p.adjoint_map(self.p.forward_map(g)) + self.rho * g)

    def rhs(self, zeta):
        if self.basis is not None:
            return self.Gw @ np.ravel(zeta)
        return self._pull(self.p.adjoint_map(zeta))

    def ip(self, a, b):
        if self.basis is None:
            return float(np.sum(self.wq * a * b))
        return float(np.dot(a, b))

    def zeros(self):
        return self.p.zeros() if self.basis is None else np.zeros(self.basis.size)


def _objective(p, g, zeta, rho):
    r = p.forward_map(g) - zeta
    return p.inner_Sigma1(r, r) + rho * p.inner_Q(g, g), r


def reconstruct(zeta_obs, rho, problem, basis=None, tol=1e-8, maxiter=500, nonneg=False,
                g_true=None, x0=None):
    """Tikhonov reconstruction of the source from ``zeta_obs`` by CG on the normal equations.

    With ``nonneg`` the iterate is kept in the nonnegative cone (of basis
    coefficients if a basis is given, which suffices since the basis is
    nonnegative): CG runs on the currently free variables and restarts from
    the projected gradient whenever the active set changes, with
    backtracking so the objective never increases.
    """
    if rho < 0:
        raise ParameterError(f"need rho >= 0, got {rho}")
    zeta_obs = np.asarray(zeta_obs, dtype=float)
    if not np.all(np.isfinite(zeta_obs)):
        raise ParameterError("non-finite observation")
    ne = _NormalEquations(problem, rho, basis)
    b = ne.rhs(zeta_obs)
    x = ne.zeros() if x0 is None else np.array(x0, dtype=float)
    if nonneg:
        x = np.maximum(x, 0)
    r = b - ne.apply(x) if np.any(x) else b.copy()
    r0 = math.sqrt(ne.ip(b, b))
    trace = []

    def finish(x, it, converged):
        g = ne.to_field(x)
        J, res = _objective(problem, g, zeta_obs, rho)
        err = None
        if g_true is not None:
            d = g - g_true
            err = math.sqrt(problem.inner_Q(d, d) / problem.inner_Q(g_true, g_true))
        if not converged:
            log.warning("reconstruction unconverged after %d iterations (rho=%g)", it, rho)
        return ReconstructionResult(g, math.sqrt(problem.inner_Sigma1(res, res)), rho, it, converged,
                                    err, trace, None if basis is None else x)

    if r0 == 0:
        return finish(x, 0, True)

    def J_of(x, r):
        # objective up to the constant ||zeta||^2: <x, A x> - 2 <b, x> with A x = b - r
        return -ne.ip(x, r) - ne.ip(b, x)

    if not nonneg:
        d = r.copy()
        rr = ne.ip(r, r)
        for it in range(1, maxiter + 1):
            Ad = ne.apply(d)
            a = rr / ne.ip(d, Ad)
            x = x + a * d
            r = r - a * Ad
            trace.append(J_of(x, r))
            rr_new = ne.ip(r, r)
            if math.sqrt(rr_new) <= tol * r0:
                return finish(x, it, True)
            d = r + (rr_new / rr) * d
            rr = rr_new
        return finish(x, maxiter, False)

    def free_mask(x, r):
        return (x > 0) | (r > 0)

    mask = free_mask(x, r)
    rf = np.where(mask, r, 0.0)
    d = rf.copy()
    rr = ne.ip(rf, rf)
    J = J_of(x, r)
    for it in range(1, maxiter + 1):
        if math.sqrt(rr) <= tol * r0:
            return finish(x, it - 1, True)
        Ad = ne.apply(d)
        dAd = ne.ip(d, Ad)
        if dAd <= 0:
            return finish(x, it, False)
        a = ne.ip(rf, d) / dAd
        xt = x + a * d
        if np.all(xt >= 0):
            x, r = xt, r - a * Ad
            J = J_of(x, r)
            trace.append(J)
            new_mask = free_mask(x, r)
            rf_new = np.where(new_mask, r, 0.0)
            rr_new = ne.ip(rf_new, rf_new)
            if np.array_equal(new_mask, mask):
                d = rf_new + (rr_new / rr) * d
            else:
                d = rf_new.copy()
            mask, rf, rr = new_mask, rf_new, rr_new
            continue
        # projected step with backtracking, then steepest-descent restart
        accepted = False
        for _ in range(40):
            xc = np.maximum(x + a * d, 0)
            rc = b - ne.apply(xc)
            Jc = J_of(xc, rc)
            if Jc <= J:
                accepted = True
                break
            a *= 0.5
        if not accepted:
            return finish(x, it, False)
        x, r, J = xc, rc, Jc
        trace.append(J)
        mask = free_mask(x, r)
        rf = np.where(mask, r, 0.0)
        d = rf.copy()
        rr = ne.ip(rf, rf)
    return finish(x, maxiter, math.sqrt(rr) <= tol * r0)


def add_noise(zeta, level, rng, problem):
    """Gaussian noise with expected L2(Sigma1) norm ``level * ||zeta||``."""
    nz = math.sqrt(problem.inner_Sigma1(zeta, zeta))
    area = problem.n * float(np.sum(problem.grid.boundary_weights(2)))
    std = level * nz / math.sqrt(area)
    noise = std * rng.standard_normal(zeta.shape)
    return zeta + noise, math.sqrt(problem.inner_Sigma1(noise, noise))


def discrepancy_reconstruct(zeta_obs, noise_norm, problem, rhos, basis=None, tau=1.1, g_true=None,
                            nonneg=False, tol=1e-8, maxiter=500, refine=30):
    """Tikhonov solution whose residual matches ``tau * noise_norm``.

    ``rhos`` is scanned from large to small with warm starts until the
    residual drops below the target; the bracket is then refined by bisection
    in log rho, keeping the largest admissible value. If no rho in the grid
    is admissible the smallest one is returned.
    """
    target = tau * noise_norm
    grid_rhos = sorted(rhos, reverse=True)

    def run(rho, x0):
        return reconstruct(zeta_obs, rho, problem, basis=basis, tol=tol, maxiter=maxiter,
                           nonneg=nonneg, g_true=g_true, x0=x0)

    def start(res):
        return res.coefficients if basis is not None else res.g_hat

    prev = None
    for rho in grid_rhos:
        res = run(rho, None if prev is None else start(prev))
        if res.residual_norm <= target:
            break
        prev = res
    else:
        return res
    if prev is None:
        return res
    lo, hi = math.log(res.rho), math.log(prev.rho)
    best = res
    for _ in range(refine):
        mid = 0.5 * (lo + hi)
        trial = run(math.exp(mid), start(best))
        if trial.residual_norm <= target:
            best, lo = trial, mid
        else:
            hi = mid
        if hi - lo < 1e-3:
            break
    return best


def desk_system():
    """Coefficients of the standard small setup: two coupled components,
    Robin inner circle, Dirichlet outer circle, conormal-derivative observation."""
    from carleman_lab.forward import BoundarySpec, ObservationSpec, SystemCoefficients

    def diffusion(x1, x2):
        a1 = 1.0 + 0.1 * x1**2
        a2 = 0.7 + 0.05 * x2**2
        z = np.zeros_like(x1)
        return np.array([[[a1, z], [z, a1]], [[a2, 0.1 + z], [0.1 + z, a2]]])

    coeffs = SystemCoefficients(
        2, diffusion,
        drift=np.array([[0.2, 0.0], [0.0, -0.1]]),
        coupling=np.array([[0.5, -0.3], [-0.2, 0.4]]),
        mu=0.6,
    )
    bspec = BoundarySpec.from_kinds([("R", "D"), ("R", "D")])
    return coeffs, bspec, ObservationSpec.normal_derivative(2)


def desk_problem(nr=16, ntheta=32, T=1.0, nt=64, r0=1.0, r1=2.0):
    from carleman_lab.forward import Problem
    from carleman_lab.geometry import build_annulus_grid

    grid = build_annulus_grid(r0, r1, nr, ntheta, T, nt)
    return Problem(grid, *desk_system())
