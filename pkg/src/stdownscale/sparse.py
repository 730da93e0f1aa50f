"""Sparse symmetric matrix helpers and a sparse Cholesky factor.

Symmetric matrices are held as full-storage ``scipy.sparse.csc_matrix``
objects with sorted indices and no stored zeros.  The lower triangle is
what gets exported.
"""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a factorization meets a non-positive pivot.

    ``pivot`` is the offending row/column in the caller's ordering.
    """

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


def canonical(A):
    """Return ``A`` as CSC with sorted indices and explicit zeros removed."""
    A = sp.csc_matrix(A, dtype=float, copy=True)
    A.eliminate_zeros()
    A.sort_indices()
    return A


def symmetrize(A):
    """Average ``A`` with its transpose (kills assembly round-off asymmetry)."""
    A = sp.csc_matrix(A)
    return canonical(0.5 * (A + A.T))


def is_symmetric(A, tol=0.0):
    D = sp.csc_matrix(A) - sp.csc_matrix(A).T
    if D.nnz == 0:
        return True
    return float(np.abs(D.data).max()) <= tol


def lower_triangle(A):
    return canonical(sp.tril(A, format="csc"))


def write_matrix_market(path, A, comment=None):
    """Write the lower triangle of a symmetric matrix as 1-based triplets."""
    L = sp.coo_matrix(lower_triangle(A))
    order = np.lexsort((L.row, L.col))
    with open(path, "w") as fh:
        fh.write("%%MatrixMarket matrix coordinate real symmetric\n")
        if comment:
            for line in str(comment).splitlines():
                fh.write("% " + line + "\n")
        fh.write(f"{A.shape[0]} {A.shape[1]} {L.nnz}\n")
        for r, c, v in zip(L.row[order], L.col[order], L.data[order]):
            fh.write(f"{r + 1} {c + 1} {v:.17g}\n")


def read_matrix_market(path):
    rows, cols, vals = [], [], []
    shape = None
    with open(path) as fh:
        for line in fh:
            if line.startswith("%"):
                continue
            parts = line.split()
            if not parts:
                continue
            if shape is None:
                shape = (int(parts[0]), int(parts[1]))
                continue
            rows.append(int(parts[0]) - 1)
            cols.append(int(parts[1]) - 1)
            vals.append(float(parts[2]))
    L = sp.coo_matrix((vals, (rows, cols)), shape=shape).tocsc()
    return canonical(L + sp.triu(L.T, k=1))


class SparseCholesky:
    """Fill-reducing sparse factorization ``P Q P' = L D L'`` of an SPD matrix.

    Backed by SuperLU run in symmetric mode with diagonal pivoting only, so
    the LU factors are an LDL' decomposition under a symmetric minimum-degree
    permutation.  A non-positive entry of ``D`` means ``Q`` is not SPD.
    """

    def __init__(self, Q):
        Q = sp.csc_matrix(Q, dtype=float)
        n = Q.shape[0]
        if Q.shape != (n, n):
            raise ValueError("matrix must be square")
        self.n = n
        try:
            lu = spla.splu(
                Q,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options=dict(SymmetricMode=True),
            )
        except RuntimeError as exc:
            raise NotPositiveDefiniteError(f"factorization failed: {exc}") from exc
        if not np.array_equal(lu.perm_r, lu.perm_c):
            raise NotPositiveDefiniteError("factorization needed off-diagonal pivoting")
        d = lu.U.diagonal()
        bad = np.flatnonzero(~(d > 0.0))
        if bad.size:
            # factor position -> original index
            original = np.argsort(lu.perm_r)[bad[0]]
            raise NotPositiveDefiniteError(
                f"matrix is not positive definite: pivot {original} "
                f"(elimination step {bad[0]}) has value {d[bad[0]]:.3e}",
                pivot=int(original),
            )
        self._lu = lu
        self._d = d
        self._perm = lu.perm_r

    def logdet(self):
        return float(np.sum(np.log(self._d)))

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        return self._lu.solve(b)

    def diag_d(self):
        return self._d.copy()

    def apply_sqrt(self, z):
        """Return ``w = P' L D^{1/2} z`` so that ``Cov(w) = Q`` for white ``z``."""
        z = np.asarray(z, dtype=float)
        scaled = z * (np.sqrt(self._d)[:, None] if z.ndim == 2 else np.sqrt(self._d))
        w = self._lu.L @ scaled
        return w[self._perm]

    def sample_centered(self, z):
        """Map standard normals ``z`` (n or n x m) to draws from N(0, Q^{-1})."""
        return self.solve(self.apply_sqrt(z))

    def inverse_columns(self, idx):
        """Columns ``idx`` of ``Q^{-1}`` as a dense (n, len(idx)) array."""
        idx = np.atleast_1d(np.asarray(idx, dtype=int))
        E = np.zeros((self.n, idx.size))
        E[idx, np.arange(idx.size)] = 1.0
        return self.solve(E)
