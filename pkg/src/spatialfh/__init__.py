"""Multivariate Fay-Herriot small area estimation with spatial latent effects."""

__version__ = "0.1.0"
