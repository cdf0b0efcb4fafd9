"""Sparse direct solves with equilibration and one step of refinement."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)


class SingularMatrixError(ArithmeticError):
    pass


def equilibrate(A: sp.spmatrix) -> tuple[np.ndarray, np.ndarray]:
    """Row then column max-norm scaling factors ``(r, c)`` for ``diag(r) A diag(c)``."""
    A = sp.csr_matrix(A)
    absA = abs(A)
    rmax = absA.max(axis=1).toarray().ravel()
    r = np.where(rmax > 0, 1.0 / np.where(rmax > 0, rmax, 1.0), 1.0)
    cmax = (sp.diags(r) @ absA).max(axis=0).toarray().ravel()
    c = np.where(cmax > 0, 1.0 / np.where(cmax > 0, cmax, 1.0), 1.0)
    return r, c


@dataclass
class Factorization:
    """LU factors of ``A`` (optionally equilibrated)."""
    matrix: sp.csc_matrix
    lu: object
    row_scale: np.ndarray
    col_scale: np.ndarray
    singular: bool = False
    pivot_growth: float = float("nan")

    @property
    def shape(self):
        return self.matrix.shape

    def solve(self, rhs: np.ndarray, refine: bool = True) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape[0] != self.matrix.shape[0]:
            raise ValueError(f"rhs has length {rhs.shape[0]}, system has {self.matrix.shape[0]}")
        if self.singular:
            raise SingularMatrixError("matrix is singular to working precision")
        if not np.any(rhs):
            return np.zeros_like(rhs)
        x = self._solve_once(rhs)
        if refine:
            r = rhs - self.matrix @ x
            x = x + self._solve_once(r)
        return x

    def _solve_once(self, b):
        return self.col_scale * self.lu.solve(self.row_scale * b)


def factorize(matrix: sp.spmatrix, equilibrated: bool = True,
              singular_rtol: float = 1e-13) -> Factorization:
    """Sparse LU with partial pivoting (threshold 1) and COLAMD ordering.

    A factorization that hits an exactly zero pivot, or whose smallest
    pivot is below ``singular_rtol`` times the largest, is flagged
    ``singular``; :meth:`Factorization.solve` then raises.
    """
    A = sp.csc_matrix(matrix, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("matrix must be square")
    if equilibrated:
        r, c = equilibrate(A)
    else:
        r, c = np.ones(n), np.ones(n)
    As = sp.csc_matrix(sp.diags(r) @ A @ sp.diags(c))
    try:
        lu = spla.splu(As, permc_spec="COLAMD", diag_pivot_thresh=1.0)
    except RuntimeError as exc:
        log.debug("LU failed: %s", exc)
        return Factorization(A, None, r, c, singular=True)
    udiag = np.abs(lu.U.diagonal())
    amax = abs(As).max() if As.nnz else 0.0
    growth = float(abs(lu.U).max() / amax) if amax > 0 else float("inf")
    singular = bool(udiag.size and udiag.min() <= singular_rtol * udiag.max())
    return Factorization(A, lu, r, c, singular=singular, pivot_growth=growth)


def solve(factorization: Factorization, rhs: np.ndarray) -> np.ndarray:
    return factorization.solve(rhs)


def solve_system(matrix: sp.spmatrix, rhs: np.ndarray) -> np.ndarray:
    return factorize(matrix).solve(rhs)
