"""
Quantile regression tree ensembles for satellite-gauge precipitation merging.
"""

__version__ = "0.1.0"
