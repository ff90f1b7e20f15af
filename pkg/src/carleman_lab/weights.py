"""Carleman auxiliary functions and weights on the annulus.

The auxiliary function is the linear radial profile
``psi0(x) = (|x| - r0) / (r1 - r0)`` and ``psi = psi0 + K``. All weights are
built from it:

    phi(t, x)   = exp(lam*psi(x)) / (t (T - t))
    alpha(t, x) = (exp(lam*psi(x)) - exp(1.5*lam*(K + 1))) / (t (T - t))

plus the unshifted pair (phi0, alpha0) and the space-independent bounds
phi_bar, phi_under, alpha_bar, alpha_under.

Products like ``exp(s*alpha)`` underflow for every practical parameter set, so
the functions here return exponents (``s*alpha``) or logarithms; callers
exponentiate only after factoring out a common scale.
"""

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from carleman_lab.errors import ParameterError, SingularityError

log = logging.getLogger(__name__)

ALPHA_KINDS = ("alpha0", "alpha", "alpha_bar", "alpha_under")
PHI_KINDS = ("phi0", "phi", "phi_bar", "phi_under")
KINDS = PHI_KINDS + ALPHA_KINDS


@dataclass(frozen=True)
class CarlemanParams:
    """Every tuning constant of the weight construction.

    ``s_prime`` defaults to ``1.25 * gamma_bar * s`` and ``gamma`` to
    ``gamma_bar ** (1 / (m + 3))``.
    """

    lam: float
    s: float
    gamma_bar: float = 2.0
    s_prime: float = None
    gamma: float = None
    K: int = 7
    sigma: float = 2.0
    m: float = 3

    def __post_init__(self):
        if self.s_prime is None:
            object.__setattr__(self, "s_prime", 1.25 * self.gamma_bar * self.s)
        if self.gamma is None:
            object.__setattr__(self, "gamma", self.gamma_bar ** (1.0 / (self.m + 3)))
        checks = [
            (self.lam > 0, "lam > 0"),
            (self.s > 0, "s > 0"),
            (self.gamma_bar > 1, "gamma_bar > 1"),
            (self.s_prime > self.gamma_bar * self.s, "s_prime > gamma_bar * s"),
            (self.gamma > 1, "gamma > 1"),
            (self.K >= 7, "K >= 7"),
            (self.sigma > 1, "sigma > 1"),
            (self.m > 0, "m > 0"),
        ]
        for ok, what in checks:
            if not ok:
                raise ParameterError(f"CarlemanParams requires {what}: {self}")

    @property
    def big_exponent(self):
        """log of exp(1.5 * lam * ||psi||_C) with ||psi||_C = K + 1."""
        return 1.5 * self.lam * (self.K + 1)


def psi0(grid):
    return (grid.rr - grid.r0) / (grid.r1 - grid.r0)


def psi0_gradient_norm(grid):
    return np.full(grid.space_shape, 1.0 / (grid.r1 - grid.r0))


def psi0_normal_derivative(grid, comp):
    from carleman_lab.geometry import GAMMA0, GAMMA1

    sign = {GAMMA0: -1.0, GAMMA1: 1.0}[comp]
    return np.full(grid.ntheta, sign / (grid.r1 - grid.r0))


def choose_K(ratio=Fraction(8, 7), sup_psi0=1, inf_psi0=0):
    """Smallest positive integer K with (sup psi0 + K) / (inf psi0 + K) <= ratio."""
    K = 1
    while Fraction(sup_psi0 + K, inf_psi0 + K) > ratio:
        K += 1
    return K


def _time_factor(grid_or_T, t):
    T = getattr(grid_or_T, "T", grid_or_T)
    return t * (T - t)


def _log_numerator(kind, params, psi0_value):
    """log exp(lam * psi) for the requested family member."""
    lam, K = params.lam, params.K
    base = kind.replace("phi", "").replace("alpha", "")
    if base == "0":
        return lam * psi0_value
    if base == "":
        return lam * (psi0_value + K)
    if base == "_bar":
        return lam * (K + 1) + 0 * psi0_value
    if base == "_under":
        return lam * K + 0 * psi0_value
    raise ParameterError(f"unknown weight kind {kind!r}")


def _shift_exponent(kind, params):
    # alpha0 uses ||psi0||_C = 1, every other alpha uses ||psi||_C = K + 1
    return 1.5 * params.lam if kind == "alpha0" else params.big_exponent


def weight_numerator(kind, params, psi0_value):
    """Time-independent numerator of the weight (phi: exp(lam psi), alpha: difference)."""
    if kind not in KINDS:
        raise ParameterError(f"unknown weight kind {kind!r}")
    a = _log_numerator(kind, params, np.asarray(psi0_value, dtype=float))
    if kind in PHI_KINDS:
        return np.exp(a)
    b = _shift_exponent(kind, params)
    # e^a - e^b computed as -e^b (1 - e^(a-b)) to keep precision for a << b
    return -np.exp(b) * -np.expm1(a - b)


def eval_weight(kind, grid, params, t, x):
    """Pointwise value of a weight at time ``t`` and point ``x = (x1, x2)``."""
    if not 0 < t < grid.T:
        if kind in PHI_KINDS:
            raise SingularityError(f"{kind} is singular at t={t}")
        raise SingularityError(
            f"{kind} diverges at t={t}; use exp_weight for the limit of exp(s*{kind})"
        )
    p0 = (math.hypot(*x) - grid.r0) / (grid.r1 - grid.r0)
    return float(weight_numerator(kind, params, p0) / _time_factor(grid, t))


def exp_weight(kind, grid, params, s, t, x):
    """exp(s * alpha-kind) at one point, 0 at t in {0, T} by continuity."""
    if kind not in ALPHA_KINDS:
        raise ParameterError(f"exp_weight needs an alpha kind, got {kind!r}")
    if t <= 0 or t >= grid.T:
        return 0.0
    return math.exp(s * eval_weight(kind, grid, params, t, x))


@dataclass
class WeightField:
    """A weight sampled on the grid.

    ``values`` holds the interior time levels ``t[1:-1]`` only. ``full()``
    returns all levels with the analytic endpoint limit: -inf for alpha
    kinds (so exp(s*alpha) = 0) and +inf for phi kinds (flagged singular).
    """

    kind: str
    values: np.ndarray
    params: CarlemanParams
    singular: np.ndarray = field(default=None, repr=False)

    def full(self):
        nt1 = self.values.shape[0] + 2
        out = np.empty((nt1,) + self.values.shape[1:])
        out[1:-1] = self.values
        out[[0, -1]] = -np.inf if self.kind in ALPHA_KINDS else np.inf
        return out

    def exponent(self, s):
        """``s * alpha`` on every time level (-inf at the endpoints)."""
        if self.kind not in ALPHA_KINDS:
            raise ParameterError(f"{self.kind} is not an exponent weight")
        return s * self.full()

    def log(self):
        """log of a phi-kind weight on every level (+inf at the endpoints)."""
        if self.kind not in PHI_KINDS:
            raise ParameterError(f"{self.kind} is not a positive weight")
        return np.log(self.full())


def weight_field(kind, grid, params):
    num = weight_numerator(kind, params, psi0(grid))
    tf = _time_factor(grid, grid.t[1:-1])
    vals = num[None, :, :] / tf[:, None, None]
    sing = np.zeros(grid.nt + 1, dtype=bool)
    sing[[0, -1]] = True
    return WeightField(kind, vals, params, singular=sing)


def C_m(m):
    """sup over mu >= 0 of mu^m exp(-mu), attained at mu = m."""
    return m**m * math.exp(-m)


@dataclass(frozen=True)
class DominationResult:
    log_sup_ratio: float
    C_m: float
    holds: bool

    @property
    def sup_ratio(self):
        return math.exp(self.log_sup_ratio) if self.log_sup_ratio > -745 else 0.0


def weight_domination_check(params, grid, s1, s2, rtol=1e-6):
    """Check phi^m s2^m lam^m exp(s2 alpha) <= C(m) exp(s1 alpha) on every interior node."""
    if not s2 / s1 > 1:
        raise ParameterError(f"need s2/s1 > 1, got {s2 / s1}")
    m, lam = params.m, params.lam
    phi = weight_field("phi", grid, params).values
    alpha = weight_field("alpha", grid, params).values
    log_ratio = m * (np.log(phi) + math.log(s2) + math.log(lam)) + (s2 - s1) * alpha
    sup = float(np.max(log_ratio))
    cm = C_m(m)
    return DominationResult(sup, cm, sup <= math.log(cm) + math.log1p(rtol))


@dataclass(frozen=True)
class ChainResult:
    j: int
    first_ok: bool  # gamma^j s alpha <= gamma^j s alpha_bar, equality only on Gamma1
    second_ok: bool  # gamma^j s alpha_bar < s alpha
    margin: float

    @property
    def holds(self):
        return self.first_ok and self.second_ok


def comparison_chain(params, grid, j):
    """Nodewise check of exp(g^j s alpha) < exp(g^j s alpha_bar) < exp(s alpha).

    Compared in exponent space. The first inequality is an equality on the
    outer circle, where psi attains its maximum K + 1. Its sign is taken from
    alpha - alpha_bar = (e^{lam psi} - e^{lam (K+1)}) / (t (T - t)) in closed
    form, since for large lam both weights round to the same double.
    """
    gj = params.gamma**j
    s = params.s
    a = weight_field("alpha", grid, params).values
    abar = weight_field("alpha_bar", grid, params).values
    e2, e3 = gj * s * abar, s * a
    lam, top = params.lam, params.K + 1
    tf = _time_factor(grid, grid.t[1:-1])[:, None, None]
    diff = -np.exp(lam * top) * -np.expm1(lam * (psi0(grid) + params.K - top)) / tf
    d1 = gj * s * diff  # e1 - e2
    inner = np.ones(grid.space_shape, dtype=bool)
    inner[-1, :] = False
    first = bool(np.all(d1[:, inner] < 0) and np.all(d1[:, ~inner] <= 0))
    second = bool(np.all(e2 < e3))
    return ChainResult(j, first, second, float(np.min(e3 - e2)))


def search_lambda(holds, lo=0.05, hi=50.0, coarse=40, refine=30):
    """Smallest lambda in [lo, hi] beyond which ``holds(lam)`` stays true.

    Coarse geometric scan for the last failure, then bisection between the
    last failing and first passing sample. Returns ``lo`` when everything
    passes and None when the predicate fails at ``hi``.
    """
    grid = np.geomspace(lo, hi, coarse)
    ok = np.array([bool(holds(lam)) for lam in grid])
    if not ok[-1]:
        return None
    fails = np.flatnonzero(~ok)
    if fails.size == 0:
        log.info("lambda search: predicate holds on all of [%g, %g]", lo, hi)
        return float(lo)
    a, b = grid[fails[-1]], grid[fails[-1] + 1]
    for _ in range(refine):
        mid = math.sqrt(a * b)
        if holds(mid):
            b = mid
        else:
            a = mid
    log.info("lambda search: threshold %.6g", b)
    return float(b)


def bootstrap_exponents(q, N):
    """Exponent ladder q_0 = 2, ..., q_m with q_{m-1} <= q < q_m.

    Each step multiplies by (N+2)/(N+2-q) while below N+2 and by 3/2 after.
    Returned as exact fractions.
    """
    if q < 2:
        raise ParameterError(f"need q >= 2, got {q}")
    if N < 1:
        raise ParameterError(f"need N >= 1, got {N}")
    q = Fraction(q)
    seq = [Fraction(2)]
    while seq[-1] <= q:
        prev = seq[-1]
        if prev < N + 2:
            seq.append((N + 2) * prev / (N + 2 - prev))
        else:
            seq.append(Fraction(3, 2) * prev)
    return seq


def final_time_for_width(lam, K, s_eff, width):
    """Final time T at which exp(s_eff * alpha) has relative time width ``width``.

    Near t = T/2 the weight behaves like exp(-c tau^2) with tau = t/T - 1/2
    and c = 16 s_eff (e^{1.5 lam (K+1)} - e^{lam (K+1)}) / T^2; ``width`` is
    the standard deviation 1/sqrt(2c).
    """
    D = math.exp(1.5 * lam * (K + 1)) - math.exp(lam * (K + 1))
    return math.sqrt(32.0 * s_eff * D) * width
