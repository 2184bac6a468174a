"""Latent-space Bayesian inference with an SMC sampler for shear-building model updating."""

__version__ = "0.1.0"
