"""Sparse Cholesky and conjugate-gradient tools for crossed random effects models."""

__version__ = "0.1.0"
