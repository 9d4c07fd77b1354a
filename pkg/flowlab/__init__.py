"""
flowlab - numerical laboratory for stochastic flows with bounded measurable drift
"""

__version__ = "0.1.0"
