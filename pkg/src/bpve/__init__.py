"""Simulation and verification toolkit for branching processes in varying environment."""

__version__ = "0.1.0"
