"""Simulation toolkit for constraint-based illiquidity: Föllmer measures,
two-price term structures, market-model kinds and the explicit arbitrage."""

__version__ = "0.1.0"
