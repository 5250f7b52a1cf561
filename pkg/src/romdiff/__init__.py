"""Reduced-basis solver for parameterized multigroup diffusion eigenvalue problems."""

__version__ = "0.1.0"
