"""Energies, equilibrium residuals, global-optimality certificates and
convex-relaxation audits for nonlinear elasticity with image-measure penalties."""

__version__ = "0.1.0"
