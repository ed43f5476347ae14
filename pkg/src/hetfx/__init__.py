"""Doubly robust estimation of heterogeneous treatment effects.

Estimates average and conditional treatment effects from observational data
with binary treatment, turns them into univariate, additive, and partial
dependence effect curves with pointwise and uniform confidence bands, and
scores effect modifiers by their share of explained effect heterogeneity.
"""
from __future__ import annotations

from ._backend import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
