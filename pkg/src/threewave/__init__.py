"""Numerical toolkit for three-wave interaction data on Lorentzian manifolds."""
__version__ = "0.1.0"
