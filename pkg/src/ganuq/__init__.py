"""Uncertainty estimation for conditional GANs: adversarial ensembles,
structured MC-dropout virtual ensembles, and distilled variance regressors,
with an efficiency/coverage evaluation harness on synthetic data."""

__version__ = "0.1.0"
