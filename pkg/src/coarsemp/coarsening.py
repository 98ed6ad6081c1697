"""Coarsening matrices, the RSA constant and greedy edge-contraction coarsening."""

import json
import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg, sparse
from scipy.sparse import csgraph

from ._validation import as_dense, check_adjacency, check_vector
from .graph import canonical_csr, laplacian_matrix


@dataclass(frozen=True)
class Coarsening:
    """A well-mapped, surjective coarsening of N nodes into n super-nodes.

    Node ``i`` is mapped to super-node ``assignment[i]`` with weight
    ``weights[i] > 0``, i.e. ``Q[assignment[i], i] = weights[i]``.
    """

    assignment: np.ndarray
    weights: np.ndarray
    Q: sparse.csr_matrix
    Q_plus: sparse.csr_matrix
    cluster_sizes: np.ndarray
    uniform: bool

    @property
    def n(self):
        return self.Q.shape[0]

    @property
    def N(self):
        return self.Q.shape[1]

    @property
    def ratio(self):
        return 1.0 - self.n / self.N

    @property
    def Pi(self):
        """The projection Q^+ Q as a sparse (N, N) matrix."""
        return (self.Q_plus @ self.Q).tocsr()

    def coarsen(self, x):
        x = check_vector(x, self.N)
        return self.Q @ x

    def lift(self, x_c):
        x_c = check_vector(x_c, self.n, "x_c")
        return self.Q_plus @ x_c

    def to_dict(self):
        return {
            "n": int(self.n),
            "N": int(self.N),
            "assignment": [int(a) for a in self.assignment],
            "weights": [float(w) for w in self.weights],
            "uniform": bool(self.uniform),
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, d):
        c = from_partition(d["assignment"], None if d.get("uniform") else d["weights"])
        if c.n != d["n"] or c.N != d["N"]:
            raise ValueError("coarsening document is inconsistent")
        return c

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def from_partition(assignment, weights=None):
    """Build Q, Q^+ from a node-to-super-node assignment.

    Parameters
    ----------
    assignment : (N,) int array with values covering 0..n-1
    weights : (N,) positive array, optional
        Mapping weights. ``None`` gives the uniform coarsening Q_ki = 1/n_k.
    """
    assignment = np.asarray(assignment, dtype=np.int64)
    if assignment.ndim != 1 or assignment.size == 0:
        raise ValueError("assignment must be a nonempty 1-D array")
    if assignment.min() < 0:
        raise ValueError("assignment contains negative super-node indices")
    N = assignment.size
    sizes = np.bincount(assignment)
    empty = np.flatnonzero(sizes == 0)
    if empty.size:
        raise ValueError(f"coarsening is not surjective: super-node {empty[0]} is empty")
    n = sizes.size
    if weights is None:
        w = 1.0 / sizes[assignment]
        uniform = True
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (N,):
            raise ValueError(f"weights have shape {w.shape}, expected ({N},)")
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise ValueError("coarsening weights must be positive and finite")
        uniform = bool(np.allclose(w, 1.0 / sizes[assignment], rtol=1e-12, atol=0))
    cols = np.arange(N)
    Q = sparse.csr_matrix((w, (assignment, cols)), shape=(n, N))
    # Q Q^T is diagonal for a well-mapped coarsening
    sq_norms = np.bincount(assignment, weights=w * w, minlength=n)
    if uniform:
        qp = np.ones(N)
    else:
        qp = w / sq_norms[assignment]
    Q_plus = sparse.csr_matrix((qp, (cols, assignment)), shape=(N, n))
    return Coarsening(
        assignment=assignment,
        weights=w,
        Q=Q,
        Q_plus=Q_plus,
        cluster_sizes=sizes,
        uniform=uniform,
    )


def identity_coarsening(N):
    return from_partition(np.arange(N))


def coarsen_signal(c, x):
    return c.coarsen(x)


def lift_signal(c, x_c):
    return c.lift(x_c)


def coarsen_adjacency(c, A):
    """A_c = (Q^+)^T A Q^+. For uniform coarsenings entries are summed cluster-to-cluster weights."""
    A = sparse.csr_matrix(A, dtype=np.float64)
    return (c.Q_plus.T @ A @ c.Q_plus).tocsr()


def coarse_laplacian_check(c, A, kind="combinatorial"):
    """Max-abs residual between D(A_c) - A_c and (Q^+)^T L Q^+.

    Only meaningful for uniform coarsenings with the combinatorial Laplacian;
    other settings raise because the identity does not hold there.
    """
    if kind != "combinatorial":
        raise ValueError("the coarse Laplacian identity only holds for the combinatorial Laplacian")
    if not c.uniform:
        raise ValueError("the coarse Laplacian identity only holds for uniform coarsenings")
    A = check_adjacency(A)
    A_c = coarsen_adjacency(c, A)
    L = laplacian_matrix(A, "combinatorial")
    L_c = sparse.diags(np.asarray(A_c.sum(axis=1)).ravel()) - A_c
    R = L_c - c.Q_plus.T @ L @ c.Q_plus
    return float(abs(R).max()) if R.nnz else 0.0


@dataclass(frozen=True)
class RsaReport:
    epsilon: float
    K: int
    finite_bound: float

    def to_dict(self):
        return {"epsilon": self.epsilon, "K": self.K, "finite_bound": self.finite_bound}


def rsa_constant(c, basis, ctx):
    """RSA constant sup_{x in R, ||x||_L = 1} ||x - Pi x||_L.

    Writing x = V a, the supremum is the square root of the largest
    generalized eigenvalue of (W^T L W, V^T L V) with W = (I - Pi) V.
    """
    V = basis.V
    L = ctx.L
    G = V.T @ L @ V
    G = 0.5 * (G + G.T)
    g = np.linalg.eigvalsh(G)
    if g.size and g[0] <= 1e-10 * max(g[-1], 1e-300):
        raise ValueError(
            "V^T L V is singular: the preserved subspace meets ker(L). Use the shifted "
            "Laplacian or spectral_subspace(..., exclude_kernel=True)"
        )
    W = V - c.Pi @ V
    M = W.T @ L @ W
    M = 0.5 * (M + M.T)
    top = linalg.eigh(M, G, eigvals_only=True)[-1]
    return RsaReport(
        epsilon=float(np.sqrt(max(top, 0.0))),
        K=int(V.shape[1]),
        finite_bound=ctx.condition_ratio if ctx.lambda_min > 0 else math.inf,
    )


@dataclass(frozen=True)
class LoukasConfig:
    """Parameters of the greedy coarsening.

    ``max_merge`` caps the number of nodes removed per sweep (``None`` means
    unbounded); ``K`` is the preserved-subspace dimension.
    """

    ratio: float
    K: int
    max_merge: Optional[int] = None
    force_uniform: bool = True

    def __post_init__(self):
        if not 0.0 <= self.ratio < 1.0:
            raise ValueError("ratio must be in [0, 1)")
        if self.K < 1:
            raise ValueError("K must be positive")
        if self.max_merge is not None and self.max_merge < 1:
            raise ValueError("max_merge must be positive or None")

    def target_size(self, N):
        n_obj = int(N - N * self.ratio)
        return max(n_obj, 1)

    @classmethod
    def defaults(cls, N, ratio, **overrides):
        """Defaults used in the experiments: K = ceil(N/10), max_merge = ceil(0.05 N), uniform."""
        params = dict(ratio=ratio, K=math.ceil(N / 10), max_merge=math.ceil(0.05 * N), force_uniform=True)
        params.update(overrides)
        return cls(**params)


@dataclass(frozen=True)
class LoukasResult:
    coarsening: Coarsening
    smp: Optional[sparse.csr_matrix]
    exhausted: bool
    sweeps: int


def _pinv_sqrt_sym(G, rtol=1e-8):
    w, U = np.linalg.eigh(0.5 * (G + G.T))
    keep = w > rtol * max(w.max(initial=0.0), 0.0)
    inv = np.zeros_like(w)
    inv[keep] = 1.0 / np.sqrt(w[keep])
    return (U * inv) @ U.T


def _edge_costs(A, L, M):
    """Cost of contracting every edge (i < j) of A.

    For C = {i, j} the complement-of-averaging projection of M's rows is
    [d; -d] with d = (m_i - m_j)/2, so ||(P M_C)^T L_C (P M_C)||_F reduces to
    ||d||^2 |L_ii + L_jj - 2 L_ij|.
    """
    U = sparse.triu(A, k=1).tocoo()
    i, j = U.row.astype(np.int64), U.col.astype(np.int64)
    d = 0.5 * (M[i] - M[j])
    Lij = np.asarray(L[i, j]).ravel()
    diag = L.diagonal()
    quad = np.abs(diag[i] + diag[j] - 2.0 * Lij)
    return i, j, np.einsum("ij,ij->i", d, d) * quad


COST_RTOL = 1e-12


def _tie_key(cost, M, L):
    """Costs snapped to a grid of COST_RTOL times their natural scale.

    Costs that differ only by rounding then compare equal and the node ids
    decide, which keeps the ordering deterministic across platforms.
    """
    scale = np.einsum("ij,ij->i", M, M).max(initial=0.0) * np.abs(L.diagonal()).max(initial=0.0)
    if not scale > 0:
        return cost
    return np.rint(cost / (COST_RTOL * scale))


def _greedy_contract(A, B, n_obj, max_merge, kind, delta):
    """Contract edges of a single graph until at most n_obj super-nodes remain.

    Returns (assignment, weights, exhausted, sweeps) where the product of the
    per-sweep uniform coarsenings is encoded column-wise.
    """
    N = A.shape[0]
    assign = np.arange(N)
    weights = np.ones(N)
    n = N
    sweeps = 0
    exhausted = False
    while n > n_obj:
        L = laplacian_matrix(A, kind, delta, strict=False)
        G = B.T @ (L @ B)
        M = B @ _pinv_sqrt_sym(G)
        i, j, cost = _edge_costs(A, L, M)
        if cost.size == 0:
            exhausted = True
            break
        order = np.lexsort((j, i, _tie_key(cost, M, L)))
        budget = n - n_obj if max_merge is None else min(n - n_obj, max_merge)
        used = np.zeros(n, dtype=bool)
        parent = np.arange(n)
        merged = 0
        for e in order:
            a, b = i[e], j[e]
            if used[a] or used[b]:
                continue
            used[a] = used[b] = True
            parent[b] = a
            merged += 1
            if merged >= budget:
                break
        # relabel super-nodes by their smallest member
        roots = np.unique(parent)
        new_label = np.empty(n, dtype=np.int64)
        new_label[roots] = np.arange(roots.size)
        step = new_label[parent]
        sizes = np.bincount(step)
        Ql = sparse.csr_matrix((1.0 / sizes[step], (step, np.arange(n))), shape=(roots.size, n))
        Ql_plus = sparse.csr_matrix((np.ones(n), (np.arange(n), step)), shape=(n, roots.size))
        weights = weights / sizes[step][assign]
        assign = step[assign]
        B = Ql @ B
        A = (Ql_plus.T @ A @ Ql_plus).tolil()
        A.setdiag(0)
        A = A.tocsr()
        A.eliminate_zeros()
        n = roots.size
        sweeps += 1
    return assign, weights, exhausted, sweeps


def _component_budgets(sizes, total_reduction):
    """Split a node-count reduction across components proportionally to their size."""
    N = sizes.sum()
    cap = sizes - 1
    share = np.minimum(np.floor(total_reduction * sizes / N).astype(np.int64), cap)
    left = total_reduction - share.sum()
    for c in np.argsort(-sizes, kind="stable"):
        if left <= 0:
            break
        extra = min(left, cap[c] - share[c])
        share[c] += extra
        left -= extra
    return share


def _initial_cost_basis(basis, ctx):
    """Factor B0 = V V^T L^-1/2 as U Z^T with Z orthonormal, returning U (N, K).

    Edge costs only see B through B (B^T L B)^-1/2 and Frobenius norms, both of
    which are unchanged when the orthonormal right factor Z^T is dropped.
    """
    V = basis.V
    W = ctx.pinv_sqrt_L @ V
    _, R = np.linalg.qr(W)
    return V @ R.T


def loukas_coarsen(A, ctx, basis, config, S=None, laplacian="shifted", delta=1e-3):
    """Greedy edge-contraction coarsening preserving the subspace spanned by ``basis``.

    Each sweep scores every current edge, contracts the cheapest
    non-overlapping edges until ``min(n - n_obj, max_merge)`` nodes have been
    removed, then rebuilds the coarse adjacency (diagonal dropped) and its
    Laplacian. Connected components are coarsened independently.

    Parameters
    ----------
    A : (N, N) adjacency
    ctx : SemiNormContext of the Laplacian of A
    basis : SpectralBasis of the preserved subspace
    config : LoukasConfig
    S : (N, N) propagation matrix, optional
        When given, the result carries S_c^MP = Q S Q^+.
    laplacian, delta : Laplacian recomputed on every coarse graph.

    Returns
    -------
    LoukasResult
    """
    A = check_adjacency(A)
    N = A.shape[0]
    if ctx.dim != N or basis.V.shape[0] != N:
        raise ValueError("context, basis and adjacency dimensions disagree")
    n_obj = config.target_size(N)
    U0 = _initial_cost_basis(basis, ctx)

    ncomp, comp = csgraph.connected_components(A, directed=False)
    assign = np.empty(N, dtype=np.int64)
    weights = np.empty(N)
    exhausted = False
    sweeps = 0
    if ncomp == 1:
        assign, weights, exhausted, sweeps = _greedy_contract(
            A, U0, n_obj, config.max_merge, laplacian, delta
        )
    else:
        sizes = np.bincount(comp)
        budgets = _component_budgets(sizes, N - n_obj)
        offset = 0
        for k in range(ncomp):
            nodes = np.flatnonzero(comp == k)
            sub = A[nodes][:, nodes].tocsr()
            a, w, ex, sw = _greedy_contract(
                sub, U0[nodes], sizes[k] - budgets[k], config.max_merge, laplacian, delta
            )
            assign[nodes] = a + offset
            weights[nodes] = w
            offset += a.max() + 1
            exhausted |= ex
            sweeps = max(sweeps, sw)
        # canonical labels: super-nodes ordered by their smallest member
        first = np.full(offset, N)
        np.minimum.at(first, assign, np.arange(N))
        relabel = np.empty(offset, dtype=np.int64)
        relabel[np.argsort(first, kind="stable")] = np.arange(offset)
        assign = relabel[assign]
    # components cannot shrink below one node, so the target may be out of reach
    exhausted |= bool(np.unique(assign).size > n_obj)
    if exhausted:
        warnings.warn("graph ran out of edges before reaching the target size", RuntimeWarning)
    coarsening = from_partition(assign, None if config.force_uniform else weights)
    smp = None
    if S is not None:
        smp = canonical_csr(coarsening.Q @ sparse.csr_matrix(S) @ coarsening.Q_plus)
    return LoukasResult(coarsening=coarsening, smp=smp, exhausted=exhausted, sweeps=sweeps)


def random_uniform_coarsening(N, n, rng, A=None):
    """A random surjective uniform coarsening with n super-nodes.

    When ``A`` is given, super-nodes never mix connected components.
    """
    if A is None:
        assignment = np.concatenate([np.arange(n), rng.integers(0, n, N - n)])
        rng.shuffle(assignment)
        return from_partition(assignment)
    ncomp, comp = csgraph.connected_components(check_adjacency(A), directed=False)
    sizes = np.bincount(comp)
    budgets = _component_budgets(sizes, N - n)
    assignment = np.empty(N, dtype=np.int64)
    offset = 0
    for k in range(ncomp):
        nodes = np.flatnonzero(comp == k)
        m = sizes[k] - budgets[k]
        local = np.concatenate([np.arange(m), rng.integers(0, m, nodes.size - m)])
        rng.shuffle(local)
        assignment[nodes] = local + offset
        offset += m
    return from_partition(assignment)


def dense_pi(c):
    return as_dense(c.Pi)
