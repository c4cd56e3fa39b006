from __future__ import annotations

import numpy as np
import scipy.linalg as la

from .matrix import InteractionMatrix


class NumericError(ArithmeticError):
    pass


def solve_ease(x, lam: float) -> np.ndarray:
    """Closed-form item-item weights with a zero diagonal.

    ``P = (X^T X + lam I)^-1`` and ``B = I - P diag(1 / diag(P))``.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    gram = x.T @ x
    gram = np.asarray(gram.todense() if hasattr(gram, "todense") else gram, dtype=np.float64)
    n = gram.shape[0]
    gram[np.diag_indices(n)] += lam
    try:
        factor = la.cho_factor(gram, lower=False, check_finite=True)
    except la.LinAlgError as exc:
        raise NumericError(f"Gram matrix is not positive definite: {exc}") from exc
    p = la.cho_solve(factor, np.eye(n))
    b = -p / np.diag(p)[None, :]
    b[np.diag_indices(n)] = 0.0
    return b


class EASE:
    name = "ease"

    def __init__(self, lam: float = 300.0):
        self.lam = lam
        self.B = None

    def fit(self, matrix: InteractionMatrix) -> "EASE":
        self.B = solve_ease(matrix.binary(), self.lam)
        return self

    def score(self, matrix: InteractionMatrix, user_idx: np.ndarray) -> np.ndarray:
        rows = matrix.ratings[np.asarray(user_idx)].copy()
        rows.data[:] = 1.0
        return np.asarray(rows @ self.B)
