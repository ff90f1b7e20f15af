"""Discrete norms on the space-time grid.

Arrays carry the grid axes last: ``(time, r, theta)`` for fields on Q and
``(time, theta)`` for traces on a boundary cylinder. Any leading axes
(components, derivative directions) are reduced pointwise by the Euclidean
norm, so ``|Dy|`` is the Euclidean norm of the gradient and ``|D^2 y|`` the
Frobenius norm of the Hessian, summed over components.

Weighted norms are evaluated in log space: ``log_lq_norm`` takes the log of
a pointwise multiplier (e.g. ``s*alpha``) and never forms it explicitly.
"""

import math

import numpy as np

from carleman_lab.geometry import GAMMA0, GAMMA1
from carleman_lab.weights import ALPHA_KINDS, weight_field

INF = math.inf


def conjugate(q):
    return INF if q == 1 else (1.0 if q == INF else q / (q - 1))


def measure_weights(grid, measure="Q"):
    if measure == "Q":
        return grid.volume_weights
    if measure == "Sigma0":
        return grid.boundary_weights(GAMMA0)
    if measure == "Sigma1":
        return grid.boundary_weights(GAMMA1)
    raise ValueError(f"unknown measure {measure!r}")


def pointwise_abs(f, grid_ndim):
    f = np.asarray(f, dtype=float)
    lead = f.ndim - grid_ndim
    if lead == 0:
        return np.abs(f)
    flat = np.abs(f.reshape((-1,) + f.shape[lead:]))
    m = flat.max(axis=0)
    safe = np.where(m > 0, m, 1.0)
    return m * np.sqrt(np.sum((flat / safe) ** 2, axis=0))


def _logsumexp(a):
    a = np.ravel(a)
    a = a[a > -np.inf]
    if a.size == 0:
        return -np.inf
    m = np.max(a)
    if m == np.inf:
        return np.inf
    return float(m + np.log(np.sum(np.exp(a - m))))


def lq_norm(field, grid, q, measure="Q"):
    """(sum w |f|^q)^(1/q), or max |f| for q = inf."""
    w = measure_weights(grid, measure)
    a = pointwise_abs(field, w.ndim)
    m = float(np.max(a))
    if q == INF or m == 0 or not np.isfinite(m):
        return m
    # scaled by the max so tiny or huge fields neither underflow nor overflow
    return m * float(np.sum(w * (a / m) ** q) ** (1.0 / q))


def log_lq_norm(field, grid, q, log_multiplier=0.0, measure="Q"):
    """log of ||f * exp(log_multiplier)||_q without forming exp(log_multiplier).

    ``log_multiplier`` broadcasts against the grid axes; -inf entries
    contribute nothing.
    """
    w = measure_weights(grid, measure)
    a = pointwise_abs(field, w.ndim)
    lm = np.broadcast_to(log_multiplier, a.shape)
    with np.errstate(divide="ignore"):
        la = np.log(a)
    if q == INF:
        vals = la + lm
        vals = vals[np.isfinite(vals) | (vals == np.inf)]
        return float(np.max(vals)) if vals.size else -np.inf
    with np.errstate(divide="ignore"):
        terms = np.log(w) + q * (la + lm)
    return _logsumexp(terms) / q


def log_integral(integrand_log, grid, measure="Q"):
    """log of sum w * exp(integrand_log)."""
    w = measure_weights(grid, measure)
    with np.errstate(divide="ignore"):
        return _logsumexp(np.log(w) + integrand_log)


def weight_exponent(kind, grid, params, s=None, measure="Q"):
    """``s * alpha_kind`` on the nodes of ``measure`` (-inf at t in {0, T})."""
    if kind not in ALPHA_KINDS:
        raise ValueError(f"weight exponent needs an alpha kind, got {kind!r}")
    s = params.s if s is None else s
    e = weight_field(kind, grid, params).exponent(s)
    if measure == "Sigma0":
        return e[:, 0, :]
    if measure == "Sigma1":
        return e[:, -1, :]
    return e


def weighted_lq_norm(field, weight_kind, params, grid, q, s=None, measure="Q", log=False):
    """||f exp(s alpha_kind)||_q; the endpoint time levels contribute 0."""
    e = weight_exponent(weight_kind, grid, params, s, measure)
    v = log_lq_norm(field, grid, q, e, measure)
    if log:
        return v
    return math.exp(v) if v > -745.0 else 0.0


def _d_r(y, h):
    return np.gradient(y, h, axis=-2, edge_order=2)


def _d_theta(y, h):
    return (np.roll(y, -1, axis=-1) - np.roll(y, 1, axis=-1)) / (2 * h)


def _d_rr(y, h):
    out = np.empty_like(y)
    out[..., 1:-1, :] = (y[..., 2:, :] - 2 * y[..., 1:-1, :] + y[..., :-2, :]) / h**2
    out[..., 0, :] = (2 * y[..., 0, :] - 5 * y[..., 1, :] + 4 * y[..., 2, :] - y[..., 3, :]) / h**2
    out[..., -1, :] = (2 * y[..., -1, :] - 5 * y[..., -2, :] + 4 * y[..., -3, :] - y[..., -4, :]) / h**2
    return out


def _d_thth(y, h):
    return (np.roll(y, -1, axis=-1) - 2 * y + np.roll(y, 1, axis=-1)) / h**2


def derivative_fields(y, grid):
    """Cartesian gradient, Hessian and time derivative of a space-time field.

    Returns ``Dy`` with a direction axis of length 2 inserted before the grid
    axes, ``D2y`` with two such axes, and ``Dty``. Second-order stencils:
    centred inside, one-sided on the circles and the time endpoints.
    """
    y = np.asarray(y, dtype=float)
    dr, dth = grid.dr, grid.dtheta
    r = grid.r[:, None]
    c, s = np.cos(grid.theta), np.sin(grid.theta)
    yr = _d_r(y, dr)
    yt = _d_theta(y, dth)
    yrr = _d_rr(y, dr)
    yrt = _d_theta(yr, dth)
    ytt = _d_thth(y, dth)
    dx = c * yr - s * yt / r
    dy = s * yr + c * yt / r
    h_rr = yrr
    h_rt = yrt / r - yt / r**2
    h_tt = ytt / r**2 + yr / r
    hxx = c**2 * h_rr - 2 * c * s * h_rt + s**2 * h_tt
    hxy = c * s * h_rr + (c**2 - s**2) * h_rt - c * s * h_tt
    hyy = s**2 * h_rr + 2 * c * s * h_rt + c**2 * h_tt
    lead = y.ndim - 3
    Dy = np.stack([dx, dy], axis=lead)
    D2y = np.stack([np.stack([hxx, hxy], axis=lead), np.stack([hxy, hyy], axis=lead)], axis=lead)
    Dty = np.gradient(y, grid.dt, axis=-3, edge_order=2)
    return {"Dy": Dy, "D2y": D2y, "Dty": Dty}


def w21q_norm(y, grid, q, derivs=None):
    d = derivs if derivs is not None else derivative_fields(y, grid)
    parts = [lq_norm(y, grid, q), lq_norm(d["Dy"], grid, q), lq_norm(d["D2y"], grid, q),
             lq_norm(d["Dty"], grid, q)]
    if q == INF:
        return max(parts)
    return float(sum(p**q for p in parts) ** (1.0 / q))
