"""SGC and two-layer GCN with hand-written gradients, trained with Adam.

Training on a coarsened graph runs the model on (S_c, X_c = Q X), lifts the
logits back with Q^+ and computes the loss on the original training nodes.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Raised when the loss becomes non-finite. ``state`` holds the last parameters."""

    def __init__(self, message, state):
        super().__init__(message)
        self.state = state


def sgc_precompute(S, X, k):
    """S^k X by repeated sparse-dense products."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    Z = np.asarray(X, dtype=np.float64)
    for _ in range(k):
        Z = S @ Z
    return np.asarray(Z)


def cross_entropy_masked(logits, labels, mask):
    """Mean softmax cross-entropy over the masked rows and its gradient w.r.t. the logits."""
    mask = np.asarray(mask, dtype=bool)
    m = int(mask.sum())
    if m == 0:
        raise ValueError("cross-entropy mask is empty")
    Z = logits[mask]
    Z = Z - Z.max(axis=1, keepdims=True)
    logp = Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))
    y = labels[mask]
    rows = np.arange(m)
    loss = -logp[rows, y].mean()
    G = np.zeros_like(logits)
    P = np.exp(logp)
    P[rows, y] -= 1.0
    G[mask] = P / m
    return float(loss), G


def _init_uniform(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class SgcModel:
    """Logits (S^k X) W. No hidden nonlinearity."""

    k: int
    W: np.ndarray
    trained: bool = False

    @classmethod
    def init(cls, k, n_features, n_classes, seed=0):
        rng = np.random.default_rng(seed)
        return cls(k=k, W=_init_uniform(rng, n_features, n_classes))

    @property
    def params(self):
        return {"W": self.W}

    def set_params(self, params):
        self.W = params["W"]

    def thetas(self):
        """Per-layer weights of the equivalent k-layer linear GNN."""
        d = self.W.shape[0]
        return [np.eye(d)] * (self.k - 1) + [self.W]

    def prepare(self, S, X):
        return sgc_precompute(S, X, self.k)

    def forward(self, S, Z, params=None):
        W = self.W if params is None else params["W"]
        return Z @ W

    def loss_and_grad(self, S, Z, labels, mask, lift=None, params=None):
        W = self.W if params is None else params["W"]
        logits = Z @ W
        if lift is not None:
            logits = lift @ logits
        loss, G = cross_entropy_masked(logits, labels, mask)
        if lift is not None:
            G = lift.T @ G
        return loss, {"W": Z.T @ G}


@dataclass
class GcnModel:
    """Logits S ReLU(S X W1) W2."""

    W1: np.ndarray
    W2: np.ndarray
    trained: bool = False

    @classmethod
    def init(cls, n_features, hidden, n_classes, seed=0):
        rng = np.random.default_rng(seed)
        return cls(W1=_init_uniform(rng, n_features, hidden), W2=_init_uniform(rng, hidden, n_classes))

    @property
    def params(self):
        return {"W1": self.W1, "W2": self.W2}

    def set_params(self, params):
        self.W1, self.W2 = params["W1"], params["W2"]

    def prepare(self, S, X):
        return np.asarray(S @ X)

    def forward(self, S, SX, params=None):
        p = self.params if params is None else params
        H = np.maximum(SX @ p["W1"], 0.0)
        return np.asarray(S @ (H @ p["W2"]))

    def loss_and_grad(self, S, SX, labels, mask, lift=None, params=None):
        p = self.params if params is None else params
        pre = SX @ p["W1"]
        H = np.maximum(pre, 0.0)
        HW = H @ p["W2"]
        logits = np.asarray(S @ HW)
        if lift is not None:
            logits = lift @ logits
        loss, G = cross_entropy_masked(logits, labels, mask)
        if lift is not None:
            G = lift.T @ G
        G_HW = np.asarray(S.T @ G)
        gW2 = H.T @ G_HW
        G_pre = (G_HW @ p["W2"].T) * (pre > 0)
        gW1 = SX.T @ G_pre
        return loss, {"W1": gW1, "W2": gW2}


def gcn_forward_backward(model, S, X, labels, mask):
    """Loss and gradients of a GCN for raw features X (S X is formed here)."""
    return model.loss_and_grad(S, model.prepare(S, X), labels, mask)


class Adam:
    """Adam with L2 weight decay added to the gradient (not decoupled)."""

    def __init__(self, params, lr=0.05, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        self.t += 1
        out = {}
        for k, p in params.items():
            g = grads[k] + self.weight_decay * p
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            m_hat = self.m[k] / (1 - self.b1**self.t)
            v_hat = self.v[k] / (1 - self.b2**self.t)
            out[k] = p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


@dataclass
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 0.05
    weight_decay: float = 0.01
    hidden: int = 16
    seed: int = 0
    select_best_val: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.learning_rate <= 0 or self.weight_decay < 0 or self.hidden < 1:
            raise ValueError("invalid training configuration")


@dataclass
class TrainResult:
    params: dict
    history: list = field(default_factory=list)
    best_epoch: Optional[int] = None
    seconds_per_epoch: float = 0.0

    @property
    def final(self):
        return self.history[-1] if self.history else None

    def to_csv_rows(self):
        return [(h["epoch"], h["loss"], h["train_acc"], h["val_acc"], h["test_acc"]) for h in self.history]


def accuracy(logits, labels, mask):
    """Share of masked rows whose argmax (lowest index on ties) matches the label."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return float("nan")
    pred = np.argmax(logits[mask], axis=1)
    return float(np.mean(pred == labels[mask]))


def evaluate(model, S, inputs, labels, mask, lift=None, params=None):
    logits = model.forward(S, inputs, params)
    if lift is not None:
        logits = lift @ logits
    return accuracy(logits, labels, mask)


def _fit(model, S, inputs, labels, masks, cfg, lift):
    train, val, test = masks
    params = {k: v.copy() for k, v in model.params.items()}
    opt = Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    history = []
    best = (-np.inf, None, params)
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        loss, grads = model.loss_and_grad(S, inputs, labels, train, lift, params)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"loss became {loss} at epoch {epoch}", {"epoch": epoch, "params": params})
        params = opt.step(params, grads)
        logits = model.forward(S, inputs, params)
        if lift is not None:
            logits = lift @ logits
        row = {
            "epoch": epoch,
            "loss": loss,
            "train_acc": accuracy(logits, labels, train),
            "val_acc": accuracy(logits, labels, val) if val is not None else float("nan"),
            "test_acc": accuracy(logits, labels, test) if test is not None else float("nan"),
        }
        history.append(row)
        if cfg.select_best_val and val is not None and row["val_acc"] > best[0]:
            best = (row["val_acc"], epoch, params)
    elapsed = time.perf_counter() - start
    best_epoch = best[1]
    if best_epoch is None:
        best_params = params
    else:
        best_params = best[2]
    model.set_params(best_params)
    model.trained = True
    logger.debug("trained %d epochs, best epoch %s", cfg.epochs, best_epoch)
    return TrainResult(
        params=best_params,
        history=history,
        best_epoch=best_epoch,
        seconds_per_epoch=elapsed / max(cfg.epochs, 1),
    )


def _masks(train_mask, val_mask=None, test_mask=None):
    return (
        np.asarray(train_mask, dtype=bool),
        None if val_mask is None else np.asarray(val_mask, dtype=bool),
        None if test_mask is None else np.asarray(test_mask, dtype=bool),
    )


def train_full(model, S, X, labels, train_mask, val_mask=None, test_mask=None, cfg=None):
    """Train ``model`` in place on the original graph."""
    cfg = cfg or TrainConfig()
    inputs = model.prepare(S, X)
    return _fit(model, S, inputs, np.asarray(labels), _masks(train_mask, val_mask, test_mask), cfg, None)


def train_coarse(model, S_c, c, X, labels, train_mask, val_mask=None, test_mask=None, cfg=None):
    """Train ``model`` in place on a coarsened graph, with the loss taken on lifted outputs.

    Labels and masks live on the original N nodes; the model sees
    ``X_c = Q X`` and the coarse propagation matrix ``S_c``.
    """
    cfg = cfg or TrainConfig()
    X_c = c.Q @ np.asarray(X, dtype=np.float64)
    inputs = model.prepare(S_c, X_c)
    lift = sparse.csr_matrix(c.Q_plus)
    return _fit(model, S_c, inputs, np.asarray(labels), _masks(train_mask, val_mask, test_mask), cfg, lift)


def sgc_objective(W, Z, labels, mask, weight_decay=0.0, lift=None):
    """Regularized SGC risk J(lift Z W) + wd/2 ||W||^2 and its gradient."""
    logits = Z @ W
    if lift is not None:
        logits = lift @ logits
    loss, G = cross_entropy_masked(logits, labels, mask)
    if lift is not None:
        G = lift.T @ G
    grad = Z.T @ G + weight_decay * W
    return loss + 0.5 * weight_decay * float(np.sum(W * W)), grad


def minimize_sgc_objective(Z, labels, mask, n_classes, weight_decay=0.0, lift=None, tol=1e-12, W0=None):
    """Solve the convex SGC problem to tolerance with L-BFGS; returns (W, objective)."""
    from scipy.optimize import minimize

    shape = (Z.shape[1], n_classes)
    x0 = np.zeros(int(np.prod(shape))) if W0 is None else np.ravel(W0)

    def fun(w):
        f, g = sgc_objective(w.reshape(shape), Z, labels, mask, weight_decay, lift)
        return f, g.ravel()

    res = minimize(fun, x0, jac=True, method="L-BFGS-B", options={"maxiter": 10000, "ftol": tol, "gtol": 1e-10})
    return res.x.reshape(shape), float(res.fun)
