"""Dense linear algebra helpers shared by the network and the filter.

Everything is float64 row-major. Sizes are desk scale (a few thousand at
most), so the routines favour clarity and numerical hygiene over raw speed.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

# Relative jitter levels tried before an SPD solve is declared hopeless.
# Each level is multiplied by trace(a)/n so the jitter scales with the matrix.
JITTER_LEVELS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)

SYMMETRY_RTOL = 1e-9


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class SingularMatrixError(ArithmeticError):
    """Matrix is not positive definite even after diagonal jitter."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array, raising structured errors."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def symmetrize(p) -> np.ndarray:
    """Return (p + p^T) / 2; the output is bit-for-bit symmetric."""
    p = as_matrix(p, "p")
    if p.shape[0] != p.shape[1]:
        raise DimensionError(f"symmetrize needs a square matrix, got {p.shape}")
    return (p + p.T) / 2.0


def spd_solve(a, b) -> np.ndarray:
    """Solve ``a @ x = b`` for symmetric positive definite ``a``.

    Uses a Cholesky factorization (never an explicit inverse). If the
    factorization fails, escalating diagonal jitter is added before giving
    up with :class:`SingularMatrixError`. ``a`` must be symmetric within
    ``SYMMETRY_RTOL`` relative to its largest entry.
    """
    a = as_matrix(a, "a")
    b = np.asarray(b, dtype=np.float64)
    n = a.shape[0]
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"spd_solve needs a square matrix, got {a.shape}")
    if b.ndim not in (1, 2) or b.shape[0] != n:
        raise DimensionError(
            f"right-hand side shape {b.shape} does not match matrix {a.shape}"
        )
    scale = np.abs(a).max()
    if scale > 0 and np.abs(a - a.T).max() > SYMMETRY_RTOL * scale:
        raise ValueError("spd_solve requires a symmetric matrix")

    base = np.trace(a) / n
    if base <= 0.0:
        base = 1.0
    eye = np.eye(n)
    for level in JITTER_LEVELS:
        try:
            factor = cho_factor(a + (level * base) * eye, lower=True)
        except (LinAlgError, ValueError):
            continue
        return cho_solve(factor, b)
    raise SingularMatrixError(
        f"matrix of shape {a.shape} is not positive definite "
        f"(jitter up to {JITTER_LEVELS[-1] * base:g} tried)"
    )
