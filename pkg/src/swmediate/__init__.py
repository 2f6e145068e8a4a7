"""Mediation analysis for cross-sectional stepped-wedge cluster randomized trials."""

__version__ = "0.1.0"
