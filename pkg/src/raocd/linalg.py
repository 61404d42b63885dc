"""Symmetric solves with an auditable jitter policy."""

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import CombinationError

JITTER_START = 1e-10
JITTER_STOP = 1e-6


def sym_solve(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve A X = B for symmetric positive (semi)definite A.

    Tries a plain Cholesky factorization first, then adds
    ``c * trace(A) / p`` to the diagonal for c = 1e-10, 1e-9, ..., 1e-6.
    """
    A = 0.5 * (A + A.T)
    p = A.shape[0]
    scale = abs(np.trace(A)) / p
    if not np.all(np.isfinite(A)):
        raise CombinationError("matrix has non-finite entries")
    jitter = 0.0
    c = JITTER_START
    while True:
        try:
            factor = cho_factor(A + jitter * np.eye(p), lower=True, check_finite=False)
            return cho_solve(factor, B, check_finite=False)
        except np.linalg.LinAlgError:
            if c > JITTER_STOP * (1 + 1e-9) or scale == 0.0:
                raise CombinationError("matrix is singular beyond the jitter policy") from None
            jitter = c * scale
            c *= 10.0


def sym_inv(A: np.ndarray) -> np.ndarray:
    inv = sym_solve(A, np.eye(A.shape[0]))
    return 0.5 * (inv + inv.T)
