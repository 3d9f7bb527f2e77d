"""Neighborhood disease-factor analysis: pollution exposure scoring, mixture
clustering of neighborhoods and additive-model factor selection."""

__version__ = "0.1.0"

from ._accel import HAVE_NUMBA, backend  # noqa: E402,F401
