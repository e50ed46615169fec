"""Finite-element homogenization laboratory for Stokes flow infiltrating a
periodic porous medium."""

__version__ = "0.1.0"
