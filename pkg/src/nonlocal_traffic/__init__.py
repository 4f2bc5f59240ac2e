"""Simulation and calibration of a nonlocal traffic-flow model with saturated diffusion."""

__version__ = "0.1.0"
