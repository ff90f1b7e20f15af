"""Polar space-time grid on the annulus r0 < |x| < r1 over (0, T).

Nodes are indexed ``(i, j)`` with ``r_i = r0 + i*dr`` (``i = 0..nr``) and
``theta_j = j*dtheta`` (``j = 0..ntheta-1``, periodic). Space-time arrays use
the axis order ``(time, r, theta)``; multi-component fields prepend a
component axis.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from carleman_lab.errors import DomainError, ParameterError

INTERIOR = 0
GAMMA0 = 1  # inner circle |x| = r0
GAMMA1 = 2  # outer circle |x| = r1


@dataclass(frozen=True)
class AnnulusGrid:
    r0: float
    r1: float
    nr: int
    ntheta: int
    T: float
    nt: int

    def __post_init__(self):
        if not (self.r0 > 0 and self.r1 > self.r0):
            raise ParameterError(f"need 0 < r0 < r1, got r0={self.r0}, r1={self.r1}")
        if self.nr < 4 or self.ntheta < 8 or self.nt < 2:
            raise ParameterError(
                f"need nr >= 4, ntheta >= 8, nt >= 2; got {self.nr}, {self.ntheta}, {self.nt}"
            )
        if not self.T > 0:
            raise ParameterError(f"need T > 0, got {self.T}")

    @property
    def dr(self):
        return (self.r1 - self.r0) / self.nr

    @property
    def dtheta(self):
        return 2 * np.pi / self.ntheta

    @property
    def dt(self):
        return self.T / self.nt

    @cached_property
    def r(self):
        return self.r0 + self.dr * np.arange(self.nr + 1)

    @cached_property
    def theta(self):
        return self.dtheta * np.arange(self.ntheta)

    @cached_property
    def t(self):
        return self.dt * np.arange(self.nt + 1)

    @property
    def space_shape(self):
        return (self.nr + 1, self.ntheta)

    @property
    def shape(self):
        return (self.nt + 1, self.nr + 1, self.ntheta)

    @property
    def n_nodes(self):
        return (self.nr + 1) * self.ntheta

    @cached_property
    def rr(self):
        return np.broadcast_to(self.r[:, None], self.space_shape)

    @cached_property
    def tt(self):
        return np.broadcast_to(self.theta[None, :], self.space_shape)

    @cached_property
    def x1(self):
        return self.rr * np.cos(self.tt)

    @cached_property
    def x2(self):
        return self.rr * np.sin(self.tt)

    @cached_property
    def labels(self):
        lab = np.full(self.space_shape, INTERIOR, dtype=np.int8)
        lab[0, :] = GAMMA0
        lab[-1, :] = GAMMA1
        return lab

    def boundary_row(self, comp):
        """Radial index of boundary component ``comp`` (GAMMA0 or GAMMA1)."""
        if comp == GAMMA0:
            return 0
        if comp == GAMMA1:
            return self.nr
        raise DomainError(f"unknown boundary component {comp!r}")

    # quadrature

    @cached_property
    def time_weights(self):
        w = np.full(self.nt + 1, self.dt)
        w[[0, -1]] *= 0.5
        return w

    @cached_property
    def space_weights(self):
        """Trapezoidal-in-r, uniform-in-theta area weights ``r dr dtheta``."""
        wr = self.r * self.dr
        wr[[0, -1]] *= 0.5
        return np.broadcast_to((wr * self.dtheta)[:, None], self.space_shape).copy()

    @cached_property
    def volume_weights(self):
        return self.time_weights[:, None, None] * self.space_weights[None]

    def boundary_weights(self, comp):
        """Weights on the lateral cylinder over ``comp``, shape ``(nt+1, ntheta)``."""
        rb = self.r[self.boundary_row(comp)]
        return np.outer(self.time_weights, np.full(self.ntheta, rb * self.dtheta))

    @property
    def measure(self):
        return np.pi * (self.r1**2 - self.r0**2) * self.T

    def refined(self, space=2, time=2):
        return AnnulusGrid(
            self.r0, self.r1, self.nr * space, self.ntheta * space, self.T, self.nt * time
        )

    def signature(self):
        return f"{self.r0:g}:{self.r1:g}:{self.nr}x{self.ntheta}x{self.nt}:T={self.T:g}"


def build_annulus_grid(r0, r1, nr, ntheta, T, nt):
    return AnnulusGrid(float(r0), float(r1), int(nr), int(ntheta), float(T), int(nt))


def outward_normal(grid, node):
    """Outward unit normal of the annulus at boundary node ``(i, j)``."""
    i, j = node
    lab = grid.labels[i, j % grid.ntheta]
    if lab == INTERIOR:
        raise DomainError(f"node {node} is interior")
    sign = 1.0 if lab == GAMMA1 else -1.0
    th = grid.theta[j % grid.ntheta]
    return sign * np.array([np.cos(th), np.sin(th)])


def quadrature_weights(grid):
    """Volume weights on Q and lateral weights on the two boundary cylinders."""
    return {
        "Q": grid.volume_weights,
        "Sigma0": grid.boundary_weights(GAMMA0),
        "Sigma1": grid.boundary_weights(GAMMA1),
    }
