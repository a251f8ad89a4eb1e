"""Iterative object pose refinement unified with a conditional object NeRF."""

__version__ = "0.1.0"
