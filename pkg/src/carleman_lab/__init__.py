"""Numerical laboratory for inverse source problems of coupled parabolic
systems on an annulus: forward solver, Carleman weights, weighted norms,
inequality harness and source reconstruction."""

from carleman_lab.geometry import AnnulusGrid, build_annulus_grid
from carleman_lab.weights import CarlemanParams, choose_K, bootstrap_exponents
from carleman_lab.forward import (
    BoundarySpec,
    ObservationSpec,
    Problem,
    SystemCoefficients,
    check_hypotheses,
)

__all__ = [
    "AnnulusGrid",
    "build_annulus_grid",
    "CarlemanParams",
    "choose_K",
    "bootstrap_exponents",
    "BoundarySpec",
    "ObservationSpec",
    "Problem",
    "SystemCoefficients",
    "check_hypotheses",
]

__version__ = "0.1.0"
