"""Steady aqueous humor flow with Boussinesq buoyancy and conjugate heat transfer in the eye."""

__version__ = "0.1.0"
