import json

import numpy as np
import pytest
from scipy import sparse

from coarsemp.coarsening import (
    LoukasConfig,
    coarsen_adjacency,
    from_partition,
    identity_coarsening,
    loukas_coarsen,
    rsa_constant,
)
from coarsemp.datasets import principal_connected_component, random_smooth_signals
from coarsemp.graph import (
    build_laplacian,
    build_propagation,
    columns_seminorm,
    make_context,
    operator_seminorm,
    seminorm,
    spectral_subspace,
)
from coarsemp.operators import (
    OPERATOR_KINDS,
    BoundConstants,
    bound_constants,
    certify,
    coarse_operator,
    k_step_bound,
    layerwise_error_certificate,
    mp_error,
    propagate,
    single_step_bound,
    theta_constants,
    training_bound,
)

from conftest import adjacency_from_edges


@pytest.fixture(scope="module")
def geo_setup():
    """Connected geometric graph, shifted Laplacian, K = N/10, r = 0.3."""
    from coarsemp.datasets import GeometricConfig, random_geometric_graph

    g = principal_connected_component(random_geometric_graph(GeometricConfig(n=200, threshold=0.112, seed=0)))
    A = g.adjacency
    N = A.shape[0]
    ctx = make_context(build_laplacian(A, "shifted"))
    basis = spectral_subspace(ctx, int(np.ceil(N / 10)))
    S = build_propagation(A, "gcn")
    c = loukas_coarsen(A, ctx, basis, LoukasConfig.defaults(N, 0.3)).coarsening
    eps = rsa_constant(c, basis, ctx).epsilon
    return A, S, ctx, basis, c, bound_constants(S, c, ctx, basis, eps)


def _consts(eps=0.5, C_S=1.0, C_Pi=1.5, C_Pi_bar=1.0):
    return BoundConstants(epsilon=eps, C_S=C_S, C_Pi=C_Pi, C_Pi_bar=C_Pi_bar)


class TestCoarseOperator:
    @pytest.mark.parametrize("kind", ["mp", "diff", "sym", "naive"])
    def test_identity_coarsening_gives_s(self, kind, toy_adjacency):
        S = build_propagation(toy_adjacency, "gcn")
        S_c = coarse_operator(S, identity_coarsening(6), kind, A=toy_adjacency)
        np.testing.assert_allclose(S_c.toarray(), S.toarray(), atol=1e-15)

    def test_mp_with_adjacency_divides_by_cluster_size(self, toy_adjacency, toy_coarsening):
        A = toy_adjacency
        S_c = coarse_operator(A, toy_coarsening, "mp").toarray()
        A_c = coarsen_adjacency(toy_coarsening, A).toarray()
        np.testing.assert_allclose(S_c, A_c / toy_coarsening.cluster_sizes[:, None], atol=1e-15)

    def test_toy_explicit_triple_product(self, toy_adjacency, toy_coarsening):
        Q = np.array([[1 / 2, 1 / 2, 0, 0, 0, 0], [0, 0, 1 / 3, 1 / 3, 1 / 3, 0], [0, 0, 0, 0, 0, 1]])
        Qp = (Q.T > 0).astype(float)
        expected = Q @ toy_adjacency.toarray() @ Qp
        S_c = coarse_operator(toy_adjacency, toy_coarsening, "mp").toarray()
        np.testing.assert_allclose(S_c, expected, atol=1e-14)
        assert np.abs(S_c - S_c.T).max() > 0

    def test_mp_asymmetric_for_symmetric_s(self, toy_adjacency, toy_coarsening):
        S = build_propagation(toy_adjacency, "gcn")
        S_c = coarse_operator(S, toy_coarsening, "mp").toarray()
        assert np.abs(S_c - S_c.T).max() > 1e-3

    @pytest.mark.parametrize("kind", ["naive", "diag", "diff", "sym"])
    def test_baselines_symmetric(self, kind, toy_adjacency, toy_coarsening):
        S = build_propagation(toy_adjacency, "gcn")
        S_c = coarse_operator(S, toy_coarsening, kind, A=toy_adjacency).toarray()
        np.testing.assert_allclose(S_c, S_c.T, atol=1e-14)

    def test_diag_formula(self, toy_adjacency, toy_coarsening):
        S = build_propagation(toy_adjacency, "gcn")
        A_c = coarsen_adjacency(toy_coarsening, toy_adjacency).toarray()
        M = A_c + np.diag(toy_coarsening.cluster_sizes)
        d = M.sum(axis=1)
        expected = M / np.sqrt(np.outer(d, d))
        np.testing.assert_allclose(
            coarse_operator(S, toy_coarsening, "diag", A=toy_adjacency).toarray(), expected, atol=1e-15
        )

    def test_naive_needs_adjacency(self, toy_adjacency, toy_coarsening):
        with pytest.raises(ValueError, match="adjacency"):
            coarse_operator(toy_adjacency, toy_coarsening, "naive")

    def test_unknown_kind(self, toy_adjacency, toy_coarsening):
        with pytest.raises(ValueError, match="unknown operator"):
            coarse_operator(toy_adjacency, toy_coarsening, "pool")

    @pytest.mark.parametrize("kind", ["diff", "sym"])
    def test_asymmetric_s_rejected(self, kind, toy_adjacency, toy_coarsening):
        S = build_propagation(toy_adjacency, "mean")
        with pytest.raises(ValueError, match="symmetric"):
            coarse_operator(S, toy_coarsening, kind)

    def test_kinds(self):
        assert OPERATOR_KINDS == ("mp", "naive", "diag", "diff", "sym")

    @pytest.mark.parametrize("seed", range(10))
    def test_lifted_mp_is_pi_s_pi(self, seed):
        rng = np.random.default_rng(seed)
        from conftest import random_graph
        from coarsemp.coarsening import random_uniform_coarsening

        N = int(rng.integers(10, 80))
        A = random_graph(rng, N, 0.15)
        S = build_propagation(A, "gcn")
        c = random_uniform_coarsening(N, int(rng.integers(1, N)), rng)
        Pi = c.Pi.toarray()
        lifted = (c.Q_plus @ coarse_operator(S, c, "mp") @ c.Q).toarray()
        np.testing.assert_allclose(lifted, Pi @ S.toarray() @ Pi, atol=1e-10)


class TestMpError:
    def test_k0_is_rsa_residual(self, geo_setup, rng):
        A, S, ctx, basis, c, _ = geo_setup
        x = rng.standard_normal(A.shape[0])
        S_c = coarse_operator(S, c, "mp")
        assert mp_error(S, S_c, c, x, 0, ctx) == pytest.approx(seminorm(x - c.Pi @ x, ctx), rel=1e-12)

    @pytest.mark.parametrize("k", [1, 3, 6])
    def test_identity_is_zero(self, k, toy_adjacency, rng):
        S = build_propagation(toy_adjacency)
        ctx = make_context(build_laplacian(toy_adjacency))
        c = identity_coarsening(6)
        assert mp_error(S, coarse_operator(S, c, "mp"), c, rng.standard_normal(6), k, ctx) <= 1e-10

    def test_matches_dense_powers(self, toy_adjacency, toy_coarsening, rng):
        S = build_propagation(toy_adjacency).toarray()
        ctx = make_context(build_laplacian(toy_adjacency))
        S_c = coarse_operator(S, toy_coarsening, "mp").toarray()
        x = rng.standard_normal(6)
        Q, Qp = toy_coarsening.Q.toarray(), toy_coarsening.Q_plus.toarray()
        diff = np.linalg.matrix_power(S, 3) @ x - Qp @ np.linalg.matrix_power(S_c, 3) @ Q @ x
        assert mp_error(S, S_c, toy_coarsening, x, 3, ctx) == pytest.approx(np.sqrt(diff @ ctx.L @ diff))

    def test_columnwise(self, geo_setup, rng):
        A, S, ctx, basis, c, _ = geo_setup
        X = rng.standard_normal((A.shape[0], 3))
        S_c = coarse_operator(S, c, "mp")
        np.testing.assert_allclose(
            mp_error(S, S_c, c, X, 2, ctx), [mp_error(S, S_c, c, X[:, j], 2, ctx) for j in range(3)], rtol=1e-12
        )

    def test_negative_k(self, toy_adjacency, toy_coarsening):
        ctx = make_context(build_laplacian(toy_adjacency))
        with pytest.raises(ValueError):
            mp_error(toy_adjacency, toy_adjacency, toy_coarsening, np.ones(6), -1, ctx)

    def test_propagate(self, toy_adjacency, rng):
        S = build_propagation(toy_adjacency)
        x = rng.standard_normal(6)
        np.testing.assert_allclose(propagate(S, x, 2), S.toarray() @ S.toarray() @ x, atol=1e-14)


class TestBounds:
    def test_zero_epsilon(self):
        assert single_step_bound(_consts(eps=0.0), 3.0) == 0.0

    def test_identity_coarsening_constants(self, toy_adjacency):
        S = build_propagation(toy_adjacency)
        ctx = make_context(build_laplacian(toy_adjacency))
        basis = spectral_subspace(ctx, 2)
        c = identity_coarsening(6)
        consts = bound_constants(S, c, ctx, basis, rsa_constant(c, basis, ctx).epsilon)
        assert single_step_bound(consts) <= 1e-6

    def test_k1_equals_single(self):
        consts = _consts()
        assert k_step_bound(consts, 1, 2.0) == single_step_bound(consts, 2.0)

    def test_linear_in_k_when_unit_constants(self):
        consts = _consts(eps=0.2, C_S=1.0, C_Pi=1.5, C_Pi_bar=1.0)
        for k in (1, 2, 5):
            assert k_step_bound(consts, k) == pytest.approx(0.2 * 2.5 * k)

    def test_k_step_rejects_zero(self):
        with pytest.raises(ValueError):
            k_step_bound(_consts(), 0)

    def test_training_bound_instantiation(self):
        consts = _consts(eps=0.3)
        assert training_bound(consts, 0.7, 1.0, 1.0, 1, 2.0) == pytest.approx(2 * 0.7 * 2.5 * 0.3 * 2.0)
        assert training_bound(_consts(eps=0.0), 0.7, 1.0, 1.0, 3, 2.0) == 0.0

    def test_constants_definition(self, geo_setup):
        A, S, ctx, basis, c, consts = geo_setup
        Pi = c.Pi.toarray()
        Sd = S.toarray()
        assert consts.C_S == pytest.approx(operator_seminorm(Sd, ctx))
        assert consts.C_Pi == pytest.approx(operator_seminorm(Pi @ Sd, ctx))
        assert consts.C_Pi_bar == pytest.approx(operator_seminorm(Pi @ Sd @ Pi, ctx))
        assert consts.C_Pi_bar <= consts.C_Pi * operator_seminorm(Pi, ctx) + 1e-8
        assert consts.assumptions_hold

    def test_asymmetric_rejected(self, toy_adjacency, toy_coarsening):
        S = build_propagation(toy_adjacency, "mean")
        ctx = make_context(build_laplacian(toy_adjacency))
        with pytest.raises(ValueError, match="not symmetric"):
            bound_constants(S, toy_coarsening, ctx, spectral_subspace(ctx, 2), 0.1)

    def test_non_preserving_flagged(self, toy_adjacency, toy_coarsening):
        # the adjacency does not commute with the shifted Laplacian, so R is not preserved
        ctx = make_context(build_laplacian(toy_adjacency, "shifted"))
        consts = bound_constants(toy_adjacency, toy_coarsening, ctx, spectral_subspace(ctx, 2), 0.1)
        assert not consts.assumption_flags["R_preserving_S"]
        assert not consts.assumptions_hold

    def test_single_step_inequality(self, geo_setup):
        A, S, ctx, basis, c, consts = geo_setup
        X = random_smooth_signals(basis, ctx, 100, seed=3)
        err = mp_error(S, coarse_operator(S, c, "mp"), c, X, 1, ctx)
        assert np.all(err < single_step_bound(consts))

    def test_certificate_json(self, geo_setup):
        A, S, ctx, basis, c, consts = geo_setup
        cert = certify(S, c, ctx, basis, consts.epsilon, 6)
        doc = json.loads(cert.to_json())
        assert set(doc) == {"epsilon", "C_S", "C_Pi", "C_Pi_bar", "k", "bound", "assumption_flags", "leakages"}
        assert doc["bound"] == pytest.approx(k_step_bound(consts, 6))


class TestThetaConstants:
    def test_identity(self):
        per, prod = theta_constants([np.eye(3)])
        assert per[0] == 1.0 and prod[0] == 1.0

    def test_row_sums(self):
        per, _ = theta_constants([np.array([[1.0, -2.0], [0.0, 0.5]])])
        assert per[0] == 3.0

    def test_brute_force(self, rng):
        layers = [rng.standard_normal((4, 4)) for _ in range(3)]
        per, prod = theta_constants(layers)
        brute = [max(sum(abs(v) for v in row) for row in t) for t in layers]
        np.testing.assert_allclose(per, brute)
        np.testing.assert_allclose(prod, np.cumprod(brute))


class TestLayerwise:
    def test_identity_coarsening_zero(self, toy_adjacency, rng):
        S = build_propagation(toy_adjacency)
        ctx = make_context(build_laplacian(toy_adjacency))
        basis = spectral_subspace(ctx, 2)
        c = identity_coarsening(6)
        consts = bound_constants(S, c, ctx, basis, 0.0)
        cert = layerwise_error_certificate(S, S, c, rng.standard_normal((6, 2)), [np.eye(2)] * 3, ctx, consts)
        np.testing.assert_allclose(cert.E, 0, atol=1e-12)
        assert cert.holds

    @pytest.mark.parametrize("seed", range(5))
    def test_random_theta(self, seed, geo_setup):
        A, S, ctx, basis, c, consts = geo_setup
        rng = np.random.default_rng(seed)
        X = random_smooth_signals(basis, ctx, 4, seed)
        thetas = [rng.standard_normal((4, 4)) / 2 for _ in range(3)]
        cert = layerwise_error_certificate(S, coarse_operator(S, c, "mp"), c, X, thetas, ctx, consts)
        assert cert.guaranteed and cert.holds
        per, _ = theta_constants(thetas)
        X_norm = columns_seminorm(X, ctx)
        assert cert.E[0] <= consts.epsilon * per[0] * (consts.C_S + consts.C_Pi) * X_norm * (1 + 1e-8)

    def test_relu_not_guaranteed(self, geo_setup, rng):
        A, S, ctx, basis, c, consts = geo_setup
        X = random_smooth_signals(basis, ctx, 2, 0)
        cert = layerwise_error_certificate(
            S, coarse_operator(S, c, "mp"), c, X, [np.eye(2)] * 2, ctx, consts, activation=lambda z: np.maximum(z, 0)
        )
        assert not cert.guaranteed
        assert cert.E.shape == (2,)
