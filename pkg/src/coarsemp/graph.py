"""Graphs, Laplacians, propagation matrices and L-seminorm machinery.

Everything spectral is done with a dense symmetric eigendecomposition, which
keeps results deterministic for the middle-scale graphs (a few thousand nodes)
this package targets.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse

from ._validation import as_csr, as_dense, check_adjacency, check_vector, is_symmetric

LAPLACIAN_KINDS = ("combinatorial", "normalized", "shifted")
PROPAGATION_KINDS = ("adjacency", "mean", "gcn")

# relative threshold below which an eigenvalue is treated as an exact zero
ZERO_EIG_RTOL = 1e-8


@dataclass(frozen=True)
class Graph:
    """Undirected weighted graph with optional node data.

    Parameters
    ----------
    adjacency : (N, N) sparse matrix
        Symmetric, nonnegative, zero diagonal.
    features : (N, d) array, optional
    labels : (N,) int array, optional
    train_mask, val_mask, test_mask : (N,) bool arrays, optional
        Must be pairwise disjoint.
    """

    adjacency: sparse.csr_matrix
    features: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    train_mask: Optional[np.ndarray] = None
    val_mask: Optional[np.ndarray] = None
    test_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        A = check_adjacency(self.adjacency)
        object.__setattr__(self, "adjacency", A)
        N = A.shape[0]
        if self.features is not None:
            X = np.asarray(self.features, dtype=np.float64)
            if X.ndim == 1:
                X = X[:, None]
            if X.shape[0] != N:
                raise ValueError(f"features have {X.shape[0]} rows but graph has {N} nodes")
            object.__setattr__(self, "features", X)
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=np.int64)
            if y.shape != (N,):
                raise ValueError(f"labels have shape {y.shape}, expected ({N},)")
            object.__setattr__(self, "labels", y)
        masks = []
        for name in ("train_mask", "val_mask", "test_mask"):
            m = getattr(self, name)
            if m is None:
                continue
            m = np.asarray(m, dtype=bool)
            if m.shape != (N,):
                raise ValueError(f"{name} has shape {m.shape}, expected ({N},)")
            object.__setattr__(self, name, m)
            masks.append(m)
        if masks and np.any(np.sum(masks, axis=0) > 1):
            raise ValueError("train/val/test masks must be disjoint")

    @property
    def num_nodes(self):
        return self.adjacency.shape[0]

    @property
    def num_edges(self):
        """Number of stored (directed) adjacency entries, i.e. twice the undirected edge count."""
        return self.adjacency.nnz

    @property
    def has_splits(self):
        return self.train_mask is not None


def _adjacency(g):
    if isinstance(g, Graph):
        return g.adjacency
    return check_adjacency(g)


def degrees(A):
    return np.asarray(A.sum(axis=1)).ravel()


def _gcn_norm(A):
    N = A.shape[0]
    A_hat = (A + sparse.identity(N, format="csr")).tocsr()
    d = degrees(A_hat)
    d_inv_sqrt = sparse.diags(1.0 / np.sqrt(d))
    return canonical_csr(d_inv_sqrt @ A_hat @ d_inv_sqrt)


def canonical_csr(M):
    """CSR with summed duplicates and sorted indices, so products are order-stable."""
    M = sparse.csr_matrix(M)
    M.sum_duplicates()
    M.sort_indices()
    return M


def propagation_matrix(A, kind="gcn"):
    """Propagation matrix of a nonnegative symmetric CSR matrix, self-loops allowed."""
    if kind == "adjacency":
        return canonical_csr(A.copy())
    if kind == "mean":
        d = degrees(A)
        zero = np.flatnonzero(d == 0)
        if zero.size:
            raise ValueError(f"node {zero[0]} has zero degree; mean aggregation is undefined")
        return canonical_csr(sparse.diags(1.0 / d) @ A)
    if kind == "gcn":
        return _gcn_norm(A)
    raise ValueError(f"unknown propagation kind {kind!r}, expected one of {PROPAGATION_KINDS}")


def build_propagation(g, kind="gcn"):
    """Propagation matrix S of a message-passing layer.

    ``"adjacency"`` returns A, ``"mean"`` the row-stochastic D^-1 A and
    ``"gcn"`` the GCNconv matrix D(Â)^-1/2 Â D(Â)^-1/2 with Â = A + I.
    """
    return propagation_matrix(_adjacency(g), kind)


def parse_propagation(spec):
    aliases = {"adj": "adjacency", "mean": "mean", "gcn": "gcn"}
    kind = aliases.get(spec, spec)
    if kind not in PROPAGATION_KINDS:
        raise ValueError(f"unknown propagation {spec!r}")
    return kind


def laplacian_matrix(A, kind="shifted", delta=1e-3, strict=True):
    """Laplacian of an already validated CSR adjacency.

    With ``strict=False`` zero-degree nodes get a zero row under the normalized
    Laplacian instead of raising; the coarsening loop relies on this.
    """
    N = A.shape[0]
    if kind == "combinatorial":
        return (sparse.diags(degrees(A)) - A).tocsr()
    if kind == "normalized":
        d = degrees(A)
        zero = d == 0
        if strict and zero.any():
            raise ValueError(
                f"node {np.flatnonzero(zero)[0]} is isolated; the normalized Laplacian is undefined"
            )
        d_inv_sqrt = np.where(zero, 0.0, 1.0 / np.sqrt(np.where(zero, 1.0, d)))
        D = sparse.diags(d_inv_sqrt)
        eye = sparse.diags((~zero).astype(np.float64))
        return (eye - D @ A @ D).tocsr()
    if kind == "shifted":
        if not delta > 0:
            raise ValueError("delta must be positive for the shifted Laplacian")
        return ((1.0 + delta) * sparse.identity(N, format="csr") - _gcn_norm(A)).tocsr()
    raise ValueError(f"unknown Laplacian kind {kind!r}, expected one of {LAPLACIAN_KINDS}")


def build_laplacian(g, kind="shifted", delta=1e-3):
    """Symmetric p.s.d. Laplacian of a graph.

    Parameters
    ----------
    g : Graph or adjacency matrix
    kind : {"combinatorial", "normalized", "shifted"}
        ``D - A``, ``I - D^-1/2 A D^-1/2`` or ``(1 + delta) I - S`` with S the
        GCNconv propagation matrix. The shifted variant is positive definite.
    delta : float
        Shift for ``kind="shifted"``.
    """
    return laplacian_matrix(_adjacency(g), kind, delta, strict=True)


def parse_laplacian(spec):
    """Parse ``comb``, ``norm`` or ``shifted:<delta>`` into ``(kind, delta)``."""
    aliases = {"comb": "combinatorial", "norm": "normalized", "shifted": "shifted"}
    name, _, arg = spec.partition(":")
    kind = aliases.get(name, name)
    if kind not in LAPLACIAN_KINDS:
        raise ValueError(f"unknown Laplacian {spec!r}")
    delta = float(arg) if arg else 1e-3
    return kind, delta


@dataclass(frozen=True)
class SemiNormContext:
    """Cached eigendecomposition of a p.s.d. matrix L.

    Attributes
    ----------
    L : (N, N) ndarray
    eigenvalues : (N,) ndarray, increasing, exact zeros below the threshold
    eigenvectors : (N, N) ndarray, orthonormal columns, first nonzero entry positive
    kernel_basis : (N, m) ndarray spanning ker(L)
    sqrt_L, pinv_sqrt_L : (N, N) ndarray
    lambda_min, lambda_max : float
        Smallest and largest nonzero eigenvalue.
    """

    L: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    kernel_basis: np.ndarray
    sqrt_L: np.ndarray = field(repr=False)
    pinv_sqrt_L: np.ndarray = field(repr=False)
    lambda_min: float
    lambda_max: float

    @property
    def dim(self):
        return self.L.shape[0]

    @property
    def condition_ratio(self):
        """sqrt(lambda_max / lambda_min), the finiteness bound on the RSA constant."""
        return float(np.sqrt(self.lambda_max / self.lambda_min))


def _fix_signs(U, tol=1e-12):
    U = U.copy()
    for j in range(U.shape[1]):
        nz = np.flatnonzero(np.abs(U[:, j]) > tol)
        if nz.size and U[nz[0], j] < 0:
            U[:, j] *= -1
    return U


def make_context(L):
    L = as_dense(L)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ValueError(f"L must be square, got shape {L.shape}")
    if not is_symmetric(L, tol=1e-10):
        raise ValueError("L must be symmetric")
    L = 0.5 * (L + L.T)
    w, U = np.linalg.eigh(L)
    scale = np.abs(w).max(initial=0.0)
    tol = ZERO_EIG_RTOL * scale
    if w.size and w[0] < -tol:
        raise ValueError(f"L is not p.s.d.: smallest eigenvalue {w[0]:.3e}")
    zero = w <= tol
    w = np.where(zero, 0.0, w)
    U = _fix_signs(U)
    sq = np.sqrt(w)
    inv_sq = np.where(zero, 0.0, 1.0 / np.where(zero, 1.0, sq))
    sqrt_L = (U * sq) @ U.T
    pinv_sqrt_L = (U * inv_sq) @ U.T
    nonzero = w[~zero]
    return SemiNormContext(
        L=L,
        eigenvalues=w,
        eigenvectors=U,
        kernel_basis=U[:, zero],
        sqrt_L=sqrt_L,
        pinv_sqrt_L=pinv_sqrt_L,
        lambda_min=float(nonzero.min()) if nonzero.size else 0.0,
        lambda_max=float(nonzero.max()) if nonzero.size else 0.0,
    )


def seminorm(x, ctx):
    """sqrt(x^T L x); for a 2-D ``x`` the seminorm of every column."""
    x = check_vector(x, ctx.dim)
    q = np.einsum("i...,i...->...", x, ctx.L @ x)
    return np.sqrt(np.maximum(q, 0.0))


def columns_seminorm(X, ctx):
    """Sum of the L-seminorms of the columns of X."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    return float(np.sum(seminorm(X, ctx)))


def operator_seminorm(M, ctx):
    """||L^1/2 M L^-1/2||, the operator norm induced by the L-seminorm."""
    M = as_dense(M)
    if M.shape != ctx.L.shape:
        raise ValueError(f"operator has shape {M.shape}, expected {ctx.L.shape}")
    return float(np.linalg.norm(ctx.sqrt_L @ M @ ctx.pinv_sqrt_L, 2))


@dataclass(frozen=True)
class SpectralBasis:
    """Orthonormal basis V (N, K) of a preserved subspace with its eigenvalues."""

    V: np.ndarray
    eigenvalues: np.ndarray

    @property
    def K(self):
        return self.V.shape[1]

    def project(self, X):
        return self.V @ (self.V.T @ X)


def spectral_subspace(ctx, K, exclude_kernel=False):
    """The K eigenvectors of L with the smallest eigenvalues.

    With ``exclude_kernel=True`` the kernel of L is skipped, which is needed to
    compute RSA constants for Laplacians with a nontrivial kernel.
    """
    start = ctx.kernel_basis.shape[1] if exclude_kernel else 0
    if K < 1 or start + K > ctx.dim:
        raise ValueError(f"cannot take K={K} eigenvectors from a {ctx.dim}-dimensional space")
    idx = slice(start, start + K)
    return SpectralBasis(V=ctx.eigenvectors[:, idx].copy(), eigenvalues=ctx.eigenvalues[idx].copy())


def check_preserving(M, basis):
    """Leakage ||(I - B B^T) M B|| of M out of span(B).

    ``basis`` is a SpectralBasis or an (N, m) array with orthonormal columns.
    Zero means M maps the subspace into itself.
    """
    B = basis.V if isinstance(basis, SpectralBasis) else np.asarray(basis, dtype=np.float64)
    if B.shape[1] == 0:
        return 0.0
    MB = M @ B
    if sparse.issparse(MB):
        MB = MB.toarray()
    MB = np.asarray(MB)
    R = MB - B @ (B.T @ MB)
    return float(np.linalg.norm(R, 2))


def operator_norm(M):
    return float(np.linalg.norm(as_dense(M), 2))


__all__ = [
    "Graph",
    "SemiNormContext",
    "SpectralBasis",
    "as_csr",
    "build_laplacian",
    "build_propagation",
    "canonical_csr",
    "check_preserving",
    "columns_seminorm",
    "degrees",
    "laplacian_matrix",
    "make_context",
    "operator_norm",
    "operator_seminorm",
    "parse_laplacian",
    "parse_propagation",
    "propagation_matrix",
    "seminorm",
    "spectral_subspace",
]
