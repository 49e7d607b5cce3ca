"""Pathwise stationary solutions of parabolic SPDEs via infinite-horizon BDSDEs."""

__version__ = "0.1.0"
