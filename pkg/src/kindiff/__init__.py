"""Kinetic Langevin diffusion on the hypertorus for toy-crystal generation."""

__version__ = "0.1.0"
