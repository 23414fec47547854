"""Differentially private synthetic Topics API traces.

The package simulates the Topics API on a synthetic population, releases
noisy marginal statistics, fits a mixture-of-types model to them, samples
synthetic topic set sequences and measures re-identification risk.
"""

__version__ = "0.1.0"
