"""Gaussian-mixture universality lab: mixtures, feature maps, ERM, Gibbs sampling,
replica predictions and conditional CLT diagnostics."""

__version__ = "0.1.0"
