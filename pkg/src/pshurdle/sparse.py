"""Sparse symmetric positive-definite factorization.

SuperLU is run with a symmetric fill-reducing ordering and no pivoting, which
for an SPD matrix yields ``P A P^T = L D L^T`` with ``L`` unit lower
triangular.  On top of that factor we provide log-determinants, exact GMRF
sampling and the Takahashi selected inverse (entries of ``A^{-1}`` on the
sparsity pattern of ``L + L^T``).
"""

import numba
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .exceptions import NumericalError


@numba.njit(cache=True)
def _takahashi(indptr, indices, data, d):
    n = d.shape[0]
    z = np.zeros(data.shape[0])
    pos = np.full(n, -1, np.int64)
    acc = np.zeros(n)
    for i in range(n - 1, -1, -1):
        start = indptr[i] + 1
        end = indptr[i + 1]
        for p in range(start, end):
            r = indices[p]
            pos[r] = p
            acc[r] = 0.0
        for p in range(start, end):
            a = indices[p]
            la = data[p]
            for q in range(indptr[a], indptr[a + 1]):
                r = indices[q]
                if pos[r] >= 0:
                    zval = z[q]
                    acc[r] += la * zval
                    if r != a:
                        acc[a] += data[pos[r]] * zval
        diag = 1.0 / d[i]
        for p in range(start, end):
            r = indices[p]
            z[p] = -acc[r]
            diag += data[p] * acc[r]
            pos[r] = -1
        z[indptr[i]] = diag
    return z


@numba.njit(cache=True)
def _solve_unit_upper_from_lower(indptr, indices, data, b):
    # Solves L^T x = b for unit lower triangular L stored by columns.
    n = b.shape[0]
    x = b.copy()
    for i in range(n - 1, -1, -1):
        s = x[i]
        for p in range(indptr[i] + 1, indptr[i + 1]):
            s -= data[p] * x[indices[p]]
        x[i] = s
    return x


class SparseCholesky:
    """LDL^T factorization of a sparse SPD matrix.

    Parameters
    ----------
    matrix : sparse matrix, shape (n, n)
        Symmetric positive-definite matrix.

    Raises
    ------
    NumericalError
        If the matrix is not numerically positive definite.
    """

    def __init__(self, matrix):
        matrix = sp.csc_matrix(matrix)
        self.n = matrix.shape[0]
        try:
            lu = spla.splu(
                matrix,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options=dict(SymmetricMode=True),
            )
        except RuntimeError as exc:
            raise NumericalError(f"sparse factorization failed: {exc}") from exc
        if not np.array_equal(lu.perm_r, lu.perm_c):
            raise NumericalError("factorization pivoted; matrix is not positive definite")
        d = lu.U.diagonal()
        if not np.all(np.isfinite(d)) or np.any(d <= 0.0):
            raise NumericalError("matrix is not positive definite")
        lower = sp.csc_matrix(lu.L)
        lower.sort_indices()
        self._lu = lu
        self._lower = lower
        self.d = d
        # perm[i] is the position of original index i in the factored ordering
        self.perm = lu.perm_c.astype(np.int64)
        self.iperm = np.empty_like(self.perm)
        self.iperm[self.perm] = np.arange(self.n)

    @property
    def logdet(self):
        return float(np.sum(np.log(self.d)))

    def solve(self, b):
        return self._lu.solve(np.asarray(b, dtype=float))

    def sample(self, white):
        """Map standard normals to a draw with covariance ``A^{-1}``."""
        white = np.asarray(white, dtype=float)
        lw = self._lower
        y = _solve_unit_upper_from_lower(lw.indptr, lw.indices, lw.data, white / np.sqrt(self.d))
        return y[self.perm]

    def selected_inverse(self):
        """Entries of ``A^{-1}`` on the factor pattern, as a symmetric CSC matrix
        in the original ordering."""
        lw = self._lower
        z = _takahashi(lw.indptr, lw.indices, lw.data, self.d)
        cols = np.repeat(np.arange(self.n), np.diff(lw.indptr))
        rows = lw.indices
        ri = self.iperm[rows]
        ci = self.iperm[cols]
        off = rows != cols
        full_r = np.concatenate([ri, ci[off]])
        full_c = np.concatenate([ci, ri[off]])
        full_z = np.concatenate([z, z[off]])
        return sp.csc_matrix((full_z, (full_r, full_c)), shape=(self.n, self.n))
