"""Simulation, Bayesian reconstruction and evaluation of high-density
super-resolution fluorescence microscopy stacks."""

__version__ = "0.1.0"
