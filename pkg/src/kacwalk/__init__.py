"""Discrete-energy Kac walk: simulation, kinetic limits and large-deviation costs."""

__version__ = "0.1.0"
