"""Coupled heat and moisture transport in masonry: FE simulation of wall
experiments, steady-state unit-cell homogenization with imperfect
brick-mortar interfaces, and inverse parameter identification."""

__version__ = "0.1.0"

from . import errors, material  # noqa: F401
