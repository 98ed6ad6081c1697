"""Coarse propagation matrices, message-passing errors and their certified bounds."""

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from ._validation import check_symmetric_operator, is_symmetric
from .coarsening import coarsen_adjacency
from .graph import (
    canonical_csr,
    check_preserving,
    columns_seminorm,
    operator_seminorm,
    propagation_matrix,
    seminorm,
)

logger = logging.getLogger(__name__)

OPERATOR_KINDS = ("mp", "naive", "diag", "diff", "sym")


def coarse_operator(S, c, kind="mp", A=None, propagation="gcn"):
    """Propagation matrix on the coarsened graph.

    ``"mp"``     Q S Q^+, oriented and generally asymmetric
    ``"naive"``  f_S(A_c), the original propagation rule applied to A_c
    ``"diag"``   D'^-1/2 (A_c + C) D'^-1/2 with C = diag(cluster sizes)
    ``"diff"``   Q S Q^T
    ``"sym"``    (Q^+)^T S Q^+

    A_c = (Q^+)^T A Q^+ keeps its diagonal. ``A`` is required for
    ``"naive"`` and ``"diag"``; ``propagation`` names f_S.
    """
    S = sparse.csr_matrix(S, dtype=np.float64)
    Q, Qp = c.Q, c.Q_plus
    if kind == "mp":
        return canonical_csr(Q @ S @ Qp)
    if kind in ("naive", "diag"):
        if A is None:
            raise ValueError(f"operator {kind!r} needs the original adjacency")
        A_c = coarsen_adjacency(c, A)
        if kind == "naive":
            return propagation_matrix(A_c, propagation)
        M = (A_c + sparse.diags(c.cluster_sizes.astype(np.float64))).tocsr()
        d = np.asarray(M.sum(axis=1)).ravel()
        D = sparse.diags(1.0 / np.sqrt(d))
        return canonical_csr(D @ M @ D)
    if kind in ("diff", "sym"):
        if not is_symmetric(S, tol=1e-10):
            raise ValueError(f"operator {kind!r} assumes a symmetric S")
        if kind == "diff":
            return canonical_csr(Q @ S @ Q.T)
        return canonical_csr(Qp.T @ S @ Qp)
    raise ValueError(f"unknown operator kind {kind!r}, expected one of {OPERATOR_KINDS}")


def propagate(S, x, k):
    """S^k x by repeated sparse products."""
    y = np.asarray(x, dtype=np.float64)
    for _ in range(k):
        y = S @ y
    return y


def mp_error(S, S_c, c, x, k, ctx):
    """||S^k x - Q^+ S_c^k Q x||_L, per column when ``x`` is 2-D."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    full = propagate(S, x, k)
    coarse = c.Q_plus @ propagate(S_c, c.Q @ np.asarray(x, dtype=np.float64), k)
    return seminorm(full - coarse, ctx)


@dataclass(frozen=True)
class BoundConstants:
    """Multiplicative constants of the message-passing bounds.

    ``C_S = ||S||_L``, ``C_Pi = ||Pi S||_L``, ``C_Pi_bar = ||Pi S Pi||_L``.
    ``leakages`` hold the measured violations of the kernel/subspace
    preservation hypotheses; ``assumptions_hold`` is their verdict.
    """

    epsilon: float
    C_S: float
    C_Pi: float
    C_Pi_bar: float
    leakages: dict = field(default_factory=dict)
    assumption_flags: dict = field(default_factory=dict)

    @property
    def assumptions_hold(self):
        return all(self.assumption_flags.values())


PRESERVING_RTOL = 1e-8


def bound_constants(S, c, ctx, basis, epsilon):
    """Compute C_S, C_Pi, C_Pi_bar and verify the preservation hypotheses.

    S must be symmetric. ``basis`` spans the preserved subspace.
    """
    check_symmetric_operator(S)
    S_d = S.toarray() if sparse.issparse(S) else np.asarray(S, dtype=np.float64)
    Pi = c.Pi.toarray()
    PiS = Pi @ S_d
    PiSPi = PiS @ Pi
    leak = {
        "kernel_Pi": check_preserving(Pi, ctx.kernel_basis),
        "kernel_S": check_preserving(S_d, ctx.kernel_basis),
        "subspace_S": check_preserving(S_d, basis),
    }
    scale = {"kernel_Pi": np.linalg.norm(Pi, 2), "kernel_S": np.linalg.norm(S_d, 2)}
    scale["subspace_S"] = scale["kernel_S"]
    flags = {
        "kernel_preserving_Pi": bool(leak["kernel_Pi"] <= PRESERVING_RTOL * max(scale["kernel_Pi"], 1.0)),
        "kernel_preserving_S": bool(leak["kernel_S"] <= PRESERVING_RTOL * max(scale["kernel_S"], 1.0)),
        "R_preserving_S": bool(leak["subspace_S"] <= PRESERVING_RTOL * max(scale["subspace_S"], 1.0)),
    }
    consts = BoundConstants(
        epsilon=float(epsilon),
        C_S=operator_seminorm(S_d, ctx),
        C_Pi=operator_seminorm(PiS, ctx),
        C_Pi_bar=operator_seminorm(PiSPi, ctx),
        leakages=leak,
        assumption_flags=flags,
    )
    if ctx.lambda_min > 0:
        # observed only empirically to sit near 0.1; logged, never asserted
        logger.debug("C_Pi / sqrt(lambda_max/lambda_min) = %.4g", consts.C_Pi / ctx.condition_ratio)
    return consts


def single_step_bound(consts, x_norm=1.0):
    """epsilon ||x||_L (C_S + C_Pi)."""
    return consts.epsilon * x_norm * (consts.C_S + consts.C_Pi)


def _propagation_sum(consts, k):
    return sum(consts.C_Pi_bar ** (k - l) * consts.C_S ** (l - 1) for l in range(1, k + 1))


def k_step_bound(consts, k, x_norm=1.0):
    """epsilon ||x||_L (C_S + C_Pi) sum_{l=1}^k C_Pi_bar^(k-l) C_S^(l-1)."""
    if k < 1:
        raise ValueError("k must be at least 1")
    return single_step_bound(consts, x_norm) * _propagation_sum(consts, k)


def training_bound(consts, C_J, C_sigma, C_Theta, k, X_cols_norm):
    """Excess-risk bound C epsilon ||X||_{:,L} for training on the coarsened graph.

    C = 2 C_J C_sigma^k C_Theta (C_S + C_Pi) sum_l C_Pi_bar^(k-l) C_S^(l-1).
    Only claimed for the identity activation (C_sigma = 1).
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    C = 2.0 * C_J * C_sigma**k * C_Theta * (consts.C_S + consts.C_Pi) * _propagation_sum(consts, k)
    return C * consts.epsilon * X_cols_norm


def cross_entropy_lipschitz(n_train, lambda_min):
    """Upper estimate of C_J for the mean masked cross-entropy under ||.||_L.

    The logit gradient of every column has Euclidean norm at most
    1/sqrt(n_train), and ||.|| <= ||.||_L / sqrt(lambda_min) when L is
    positive definite.
    """
    if lambda_min <= 0:
        raise ValueError("C_J estimate needs a positive definite L")
    return 1.0 / math.sqrt(n_train * lambda_min)


def theta_constants(layers):
    """Max absolute row sum of every layer and their running products."""
    per_layer = np.array([np.abs(np.asarray(t, dtype=np.float64)).sum(axis=1).max() for t in layers])
    return per_layer, np.cumprod(per_layer)


@dataclass(frozen=True)
class BoundCertificate:
    """Serializable record of the k-step message-passing bound for one coarsening."""

    constants: BoundConstants
    k: int
    bound: float

    def to_dict(self):
        c = self.constants
        return {
            "epsilon": c.epsilon,
            "C_S": c.C_S,
            "C_Pi": c.C_Pi,
            "C_Pi_bar": c.C_Pi_bar,
            "k": self.k,
            "bound": self.bound,
            "assumption_flags": dict(c.assumption_flags),
            "leakages": {key: float(v) for key, v in c.leakages.items()},
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)


def certify(S, c, ctx, basis, epsilon, k):
    consts = bound_constants(S, c, ctx, basis, epsilon)
    return BoundCertificate(constants=consts, k=k, bound=k_step_bound(consts, k))


@dataclass(frozen=True)
class LayerwiseCertificate:
    """Per-layer errors of a GNN run on the coarsened graph against their bounds.

    ``E[l]`` is sum_i ||H^l_{:,i} - Q^+ (H_c^l)_{:,i}||_L and ``B[l]`` is
    sum_i ||H^l_{:,i}||_L, for l = 1..k (index 0 is layer 1).
    ``E_step`` applies one step of the error recursion to the measured
    previous-layer values, ``E_closed`` is the closed form.
    """

    E: np.ndarray
    B: np.ndarray
    E_step: np.ndarray
    E_closed: np.ndarray
    B_bound: np.ndarray
    guaranteed: bool

    @property
    def holds(self):
        slack = 1e-8
        return bool(
            np.all(self.E <= self.E_step * (1 + slack) + slack)
            and np.all(self.E <= self.E_closed * (1 + slack) + slack)
            and np.all(self.B <= self.B_bound * (1 + slack) + slack)
        )


def layerwise_error_certificate(S, S_c, c, X, thetas, ctx, consts, activation=None, C_sigma=1.0):
    """Run the GNN H^l = act(S H^{l-1} theta_l) on both graphs and bound every layer.

    The guarantee is only claimed for the identity activation; with another
    ``activation`` everything is still computed but ``guaranteed`` is False.
    """
    act = (lambda z: z) if activation is None else activation
    X = np.asarray(X, dtype=np.float64)
    H = X
    Hc = c.Q @ X
    eps, CS, CPi, CPib = consts.epsilon, consts.C_S, consts.C_Pi, consts.C_Pi_bar
    X_norm = columns_seminorm(X, ctx)
    c_theta, c_theta_bar = theta_constants(thetas)
    E, B, E_step, E_closed, B_bound = [], [], [], [], []
    prev_E, prev_B = 0.0, X_norm
    for l, theta in enumerate(thetas, start=1):
        H = act(S @ H @ theta)
        Hc = act(S_c @ Hc @ theta)
        E.append(columns_seminorm(H - c.Q_plus @ Hc, ctx))
        B.append(columns_seminorm(H, ctx))
        E_step.append(C_sigma * c_theta[l - 1] * (eps * (CS + CPi) * prev_B + CPib * prev_E))
        series = sum(CPib ** (l - p) * CS ** (p - 1) for p in range(1, l + 1))
        E_closed.append(eps * X_norm * C_sigma**l * c_theta_bar[l - 1] * (CS + CPi) * series)
        B_bound.append(c_theta_bar[l - 1] * CS**l * C_sigma**l * X_norm)
        prev_E, prev_B = E[-1], B[-1]
    return LayerwiseCertificate(
        E=np.array(E),
        B=np.array(B),
        E_step=np.array(E_step),
        E_closed=np.array(E_closed),
        B_bound=np.array(B_bound),
        guaranteed=activation is None,
    )
