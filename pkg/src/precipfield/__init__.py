"""Calibrated, spatially correlated probabilistic precipitation forecasts
postprocessed from a single numerical weather prediction forecast."""

from . import data, estimation, fields, forecasting, transforms, verification  # noqa: F401

__version__ = "0.1.0"
