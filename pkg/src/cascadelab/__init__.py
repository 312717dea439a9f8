"""Simulation, null-control synthesis and inequality certification for a
degenerate age-structured cascade population model."""

__version__ = "0.1.0"
