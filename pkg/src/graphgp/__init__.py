"""Graph Gaussian process classifier with sparse variational inference."""

__version__ = "0.1.0"
