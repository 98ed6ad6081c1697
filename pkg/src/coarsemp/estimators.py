"""scikit-learn style wrappers: a coarsening transformer and transductive node classifiers.

The classifiers are transductive: ``fit(X, y, adjacency=A, val_mask=m)`` learns
on the nodes whose label is not ``-1`` and that are not in ``m`` (the semi-supervised convention used by
``sklearn.semi_supervised``) and ``predict(X)`` labels every node of the same
graph.
"""

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin, clone
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import check_adjacency
from .coarsening import LoukasConfig, loukas_coarsen, rsa_constant
from .gnn import GcnModel, SgcModel, TrainConfig, train_coarse, train_full
from .graph import build_laplacian, build_propagation, make_context, spectral_subspace
from .operators import coarse_operator


class GraphCoarsener(TransformerMixin, BaseEstimator):
    """Greedy spectral coarsening of a graph given by its adjacency matrix.

    ``fit(A)`` computes the coarsening; ``transform(X)`` maps node signals to
    super-nodes (X_c = Q X) and ``inverse_transform(X_c)`` lifts them back.

    Parameters
    ----------
    ratio : float
        Coarsening ratio r = 1 - n/N.
    n_components : int, optional
        Dimension K of the preserved subspace; defaults to ceil(N/10).
    max_merge : int, float or None
        Nodes removed per sweep. A float in (0, 1) is a fraction of N;
        ``None`` is unbounded. Defaults to 5% of N.
    force_uniform : bool
    laplacian : {"shifted", "combinatorial", "normalized"}
    delta : float
    propagation : {"gcn", "adjacency", "mean"}

    Attributes
    ----------
    coarsening_, propagation_, coarse_propagation_, epsilon_, context_, basis_
    """

    def __init__(
        self,
        ratio=0.5,
        n_components=None,
        max_merge=0.05,
        force_uniform=True,
        laplacian="shifted",
        delta=1e-3,
        propagation="gcn",
    ):
        self.ratio = ratio
        self.n_components = n_components
        self.max_merge = max_merge
        self.force_uniform = force_uniform
        self.laplacian = laplacian
        self.delta = delta
        self.propagation = propagation

    def _max_merge(self, N):
        if self.max_merge is None:
            return None
        if isinstance(self.max_merge, float) and self.max_merge < 1:
            return max(1, math.ceil(self.max_merge * N))
        return int(self.max_merge)

    def fit(self, A, y=None):
        A = check_adjacency(A)
        N = A.shape[0]
        K = self.n_components or math.ceil(N / 10)
        self.context_ = make_context(build_laplacian(A, self.laplacian, self.delta))
        self.basis_ = spectral_subspace(self.context_, K)
        cfg = LoukasConfig(ratio=self.ratio, K=K, max_merge=self._max_merge(N), force_uniform=self.force_uniform)
        self.propagation_ = build_propagation(A, self.propagation)
        result = loukas_coarsen(
            A, self.context_, self.basis_, cfg, S=self.propagation_, laplacian=self.laplacian, delta=self.delta
        )
        self.adjacency_ = A
        self.coarsening_ = result.coarsening
        self.coarse_propagation_ = result.smp
        self.exhausted_ = result.exhausted
        self.epsilon_ = rsa_constant(result.coarsening, self.basis_, self.context_).epsilon
        return self

    def transform(self, X):
        check_is_fitted(self, "coarsening_")
        X = check_array(X, ensure_2d=False)
        return self.coarsening_.Q @ X

    def inverse_transform(self, X_c):
        check_is_fitted(self, "coarsening_")
        X_c = check_array(X_c, ensure_2d=False)
        return self.coarsening_.Q_plus @ X_c

    def coarse_operator(self, kind="mp"):
        check_is_fitted(self, "coarsening_")
        return coarse_operator(self.propagation_, self.coarsening_, kind, A=self.adjacency_, propagation=self.propagation)


class _GraphClassifier(ClassifierMixin, BaseEstimator):
    def _train_config(self):
        return TrainConfig(
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            hidden=getattr(self, "hidden", 16),
            seed=self.random_state,
        )

    def fit(self, X, y, adjacency=None, val_mask=None):
        """Train on the labelled nodes (``y != -1``) outside ``val_mask``.

        Nodes in ``val_mask`` must be labelled as well; they are held out of
        the loss and used to select the best epoch.
        """
        if adjacency is None:
            raise ValueError("transductive graph classifiers need the adjacency matrix")
        X = check_array(X)
        y = np.asarray(y)
        A = check_adjacency(adjacency)
        if X.shape[0] != A.shape[0] or y.shape[0] != A.shape[0]:
            raise ValueError("X, y and adjacency must describe the same nodes")
        labelled = y != -1
        if val_mask is not None:
            val_mask = np.asarray(val_mask, dtype=bool)
            if val_mask.shape != y.shape or np.any(val_mask & ~labelled):
                raise ValueError("val_mask must select labelled nodes")
            train = labelled & ~val_mask
        else:
            train = labelled
        self.classes_ = np.unique(y[labelled])
        y_idx = np.full(y.shape, 0, dtype=np.int64)
        y_idx[labelled] = np.searchsorted(self.classes_, y[labelled])
        S = build_propagation(A, self.propagation)
        self.model_ = self._make_model(X.shape[1], len(self.classes_))
        cfg = self._train_config()
        if self.coarsener is None:
            self.operator_, self.lift_ = S, None
            self.result_ = train_full(self.model_, S, X, y_idx, train, val_mask, None, cfg)
        else:
            self.coarsener_ = clone(self.coarsener).fit(A)
            c = self.coarsener_.coarsening_
            self.operator_ = self.coarsener_.coarse_operator(self.operator)
            self.lift_ = c.Q_plus
            self.result_ = train_coarse(self.model_, self.operator_, c, X, y_idx, train, val_mask, None, cfg)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X)
        if self.lift_ is not None:
            X = self.coarsener_.transform(X)
        logits = self.model_.forward(self.operator_, self.model_.prepare(self.operator_, X))
        if self.lift_ is not None:
            logits = self.lift_ @ logits
        return logits

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


class SGCClassifier(_GraphClassifier):
    """Simplified graph convolution: a linear classifier on S^k X.

    With a ``coarsener`` (cloned and refitted on the training graph) the model is trained on the
    coarsened graph using the coarse propagation matrix named by ``operator``.
    """

    def __init__(
        self,
        k=2,
        propagation="gcn",
        coarsener=None,
        operator="mp",
        epochs=200,
        learning_rate=0.05,
        weight_decay=0.01,
        random_state=0,
    ):
        self.k = k
        self.propagation = propagation
        self.coarsener = coarsener
        self.operator = operator
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.random_state = random_state

    def _make_model(self, d, c):
        return SgcModel.init(self.k, d, c, self.random_state)


class GCNClassifier(_GraphClassifier):
    """Two-layer GCN, S ReLU(S X W1) W2."""

    def __init__(
        self,
        hidden=16,
        propagation="gcn",
        coarsener=None,
        operator="mp",
        epochs=200,
        learning_rate=0.05,
        weight_decay=0.01,
        random_state=0,
    ):
        self.hidden = hidden
        self.propagation = propagation
        self.coarsener = coarsener
        self.operator = operator
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.random_state = random_state

    def _make_model(self, d, c):
        return GcnModel.init(d, self.hidden, c, self.random_state)
