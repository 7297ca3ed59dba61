"""Abelian sandpiles on tori and Z^2 windows: Green's functions, spectral gaps and the gap constant."""

__version__ = "0.1.0"
