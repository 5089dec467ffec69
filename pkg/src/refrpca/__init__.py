"""Reference-based robust PCA: classical solvers and an unrolled network."""

__version__ = "0.1.0"
