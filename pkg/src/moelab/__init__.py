"""Desk-scale laboratory for Mixture-of-Experts compression and router distillation."""

from moelab.errors import (
    FormatError,
    InvalidArgumentError,
    InvalidInputError,
    MoeLabError,
    NumericalError,
)

__version__ = "0.1.0"

__all__ = [
    "FormatError",
    "InvalidArgumentError",
    "InvalidInputError",
    "MoeLabError",
    "NumericalError",
]
