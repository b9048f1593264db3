"""Numeric constants shared across layers."""

# The single epsilon used by every normalization denominator in the library.
EPS = 1e-5
