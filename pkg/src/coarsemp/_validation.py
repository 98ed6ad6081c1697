"""Input validation helpers shared by the public API."""

import numpy as np
from scipy import sparse

SYMMETRY_TOL = 1e-12


def as_csr(A, name="matrix"):
    """Return ``A`` as a float64 CSR matrix, checking it is square and finite."""
    if sparse.issparse(A):
        M = sparse.csr_matrix(A, dtype=np.float64)
    else:
        M = sparse.csr_matrix(np.asarray(A, dtype=np.float64))
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square, got shape {M.shape}")
    if not np.all(np.isfinite(M.data)):
        raise ValueError(f"{name} contains non-finite values")
    M.sum_duplicates()
    M.eliminate_zeros()
    M.sort_indices()
    return M


def as_dense(M):
    if sparse.issparse(M):
        return M.toarray()
    return np.asarray(M, dtype=np.float64)


def is_symmetric(M, tol=SYMMETRY_TOL):
    if sparse.issparse(M):
        diff = abs(M - M.T)
        return diff.nnz == 0 or diff.max() <= tol * max(1.0, abs(M).max())
    M = np.asarray(M)
    return np.allclose(M, M.T, rtol=0, atol=tol * max(1.0, np.abs(M).max(initial=0.0)))


def check_adjacency(A):
    """Validate a weighted undirected adjacency matrix.

    The result is CSR, symmetric, nonnegative, with an empty diagonal.
    """
    A = as_csr(A, "adjacency")
    if A.nnz and A.data.min() < 0:
        raise ValueError("adjacency weights must be nonnegative")
    if not is_symmetric(A):
        raise ValueError("adjacency must be symmetric")
    if np.any(A.diagonal() != 0):
        raise ValueError("adjacency must have a zero diagonal")
    return A


def check_vector(x, n, name="x"):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != n:
        raise ValueError(f"{name} has {x.shape[0]} rows, expected {n}")
    return x


def check_symmetric_operator(S, name="S"):
    if not is_symmetric(S, tol=1e-10):
        raise ValueError(
            f"{name} is not symmetric; the error bounds are only defined for symmetric propagation"
        )
