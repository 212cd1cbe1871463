"""Simulation of neutral stochastic integro-differential equations with delay
driven by fractional Brownian motion (Hurst index above 1/2)."""

__version__ = "0.1.0"
