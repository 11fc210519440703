"""Identification of per-spring stiffness and damping for mass-spring cloth."""

__version__ = "0.1.0"
