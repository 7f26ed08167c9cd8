"""Desk-scale toolkit for small-noise 2D incompressible flow on the torus.

Spectral Galerkin simulation, minimum-action quasipotential estimation,
stationary-measure Monte Carlo with exponential-decay diagnostics, and a
Markov reconstruction-formula module with an exact finite-chain oracle.
"""

__version__ = "0.1.0"

from .spectral import (  # noqa: F401
    BasisSpec,
    NoiseSpec,
    SpectralField,
    bilinear,
    make_basis,
    norms,
    project_low,
    stokes_apply,
)
