"""Shared error types and input-validation helpers.

Every public operation validates its array arguments through these helpers so
dimension mistakes surface as ContractError with a readable message instead of
a numpy broadcast error three calls deeper.
"""

from __future__ import annotations

import numpy as np


class ContractError(ValueError):
    """An argument violates an operation's documented precondition."""


class SingularityError(ArithmeticError):
    """The implicit-damping factor has a zero diagonal entry."""


class DivergenceError(RuntimeError):
    """A rollout or training run produced a non-finite value."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class FormatError(IOError):
    """A serialized file has a bad magic number, version, or layout."""


def as_vector(name: str, x, dim: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ContractError(f"{name} must be a 1-D vector, got shape {x.shape}")
    if dim is not None and x.shape[0] != dim:
        raise ContractError(f"{name} must have length {dim}, got {x.shape[0]}")
    return x

def as_matrix(name: str, x, shape: tuple[int, int] | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ContractError(f"{name} must be a 2-D matrix, got shape {x.shape}")
    if shape is not None and x.shape != shape:
        raise ContractError(f"{name} must have shape {shape}, got {x.shape}")
    return x

def check_finite(name: str, x) -> np.ndarray:
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise ContractError(f"{name} contains non-finite values")
    return x

def check_positive(name: str, value: float) -> float:
    if not value > 0:
        raise ContractError(f"{name} must be > 0, got {value}")
    return float(value)
