"""Heisenberg-group geometry, single-site and lattice Gibbs samplers, and
numerical checks of the associated functional inequalities."""

from .heisenberg import (
    IDENTITY,
    GroupElement,
    HorizontalVector,
    Observable,
    dilate,
    horizontal_derivative,
    inverse,
    mul,
    sub_gradient,
    sub_laplacian,
)

__version__ = "0.1.0"
