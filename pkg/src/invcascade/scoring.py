"""Per-scale linear objectness models.

Training minimizes ``0.5 * ||w||^2 + C * sum(hinge(y * (w.x + b)))``. Two
solvers are available: seeded stochastic subgradient descent (``"sgd"``,
bias unregularized) and dual coordinate descent (``"dcd"``, bias folded in
as a constant feature, so it is regularized like a weight).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .featmap import PyramidSpec
from .geometry import as_boxes, iou_matrix


@dataclass(frozen=True)
class MiningConfig:
    pos_iou: float = 0.70
    neg_iou: float = 0.30
    pos_per_object: int = 10
    neg_per_image: int = 50
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.neg_iou < self.pos_iou <= 1.0:
            raise ValueError("need 0 < neg_iou < pos_iou <= 1")
        if self.pos_per_object < 0 or self.neg_per_image < 0:
            raise ValueError("sample counts must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    """Solver settings. ``C``, ``epochs``, ``rate0`` and ``decay`` are our own
    defaults; the learning rate at step ``t`` is ``rate0 / (1 + decay * t)``."""

    C: float = 1.0
    epochs: int = 30
    rate0: float = 0.01
    decay: float = 1e-4
    seed: int = 0
    solver: str = "sgd"
    tol: float = 1e-8
    max_iter: int = 2000

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError("C must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.solver not in ("sgd", "dcd"):
            raise ValueError(f"unknown solver {self.solver!r}")


@dataclass(frozen=True, eq=False)
class LinearModel:
    weights: np.ndarray
    bias: float
    scale_id: int = 0
    pyramid: PyramidSpec = field(default_factory=PyramidSpec)
    size_bias: bool = True
    stage: int = 1

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).ravel().copy()
        if not np.all(np.isfinite(w)) or not np.isfinite(self.bias):
            raise ValueError("model parameters must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", float(self.bias))

    @property
    def channels(self) -> int:
        """Feature channels implied by the weight length."""
        pooled = len(self.weights) - (3 if self.size_bias else 0)
        c, rem = divmod(pooled, self.pyramid.n_cells)
        if rem or c < 0:
            raise ValueError("weight length inconsistent with the descriptor spec")
        return c

    def descriptor_length(self, channels: int) -> int:
        return self.pyramid.descriptor_length(channels) + (3 if self.size_bias else 0)


def mine_samples(candidates, gt, cfg: MiningConfig = MiningConfig(), rng=None):
    """Sample positive and negative training windows from one scale's grid.

    Positives: at most ``pos_per_object`` windows per gt box with IoU above
    ``pos_iou``. Negatives: at most ``neg_per_image`` windows whose best IoU
    with every gt is below ``neg_iou``. Returns ``(positives, negatives)``
    as box arrays.
    """
    cand = as_boxes(candidates)
    gt = as_boxes(gt)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    if len(cand) == 0:
        return np.zeros((0, 4)), np.zeros((0, 4))
    if len(gt):
        ious = iou_matrix(cand, gt)
        best = ious.max(axis=1)
    else:
        ious = np.zeros((len(cand), 0))
        best = np.zeros(len(cand))
    pos_idx: list[int] = []
    for j in range(len(gt)):
        eligible = np.flatnonzero(ious[:, j] > cfg.pos_iou)
        take = min(cfg.pos_per_object, len(eligible))
        if take:
            pos_idx.extend(rng.choice(eligible, size=take, replace=False).tolist())
    pos_idx = sorted(set(pos_idx))
    eligible = np.flatnonzero(best < cfg.neg_iou)
    take = min(cfg.neg_per_image, len(eligible))
    neg_idx = np.sort(rng.choice(eligible, size=take, replace=False)) if take else np.zeros(0, int)
    return cand[pos_idx], cand[neg_idx]


def _sgd(X, y, cfg: TrainConfig):
    n, d = X.shape
    lam = 1.0 / (cfg.C * n)               # objective / (C n) has the same minimizer
    rng = np.random.default_rng(cfg.seed)
    w = np.zeros(d)
    b = 0.0
    t = 0
    for _ in range(cfg.epochs):
        for i in rng.permutation(n):
            rate = cfg.rate0 / (1.0 + cfg.decay * t)
            xi, yi = X[i], y[i]
            margin = yi * (xi @ w + b)
            w *= 1.0 - rate * lam
            if margin < 1.0:
                w += rate * yi * xi
                b += rate * yi
            t += 1
    return w, b


def _dcd(X, y, cfg: TrainConfig):
    n, d = X.shape
    Xa = np.hstack([X, np.ones((n, 1))])
    q = np.einsum("ij,ij->i", Xa, Xa)
    alpha = np.zeros(n)
    w = np.zeros(d + 1)
    rng = np.random.default_rng(cfg.seed)
    C = cfg.C
    for _ in range(cfg.max_iter):
        worst = 0.0
        for i in rng.permutation(n):
            g = y[i] * (Xa[i] @ w) - 1.0
            a = alpha[i]
            pg = min(g, 0.0) if a == 0.0 else (max(g, 0.0) if a == C else g)
            worst = max(worst, abs(pg))
            if pg != 0.0 and q[i] > 0:
                new = min(max(a - g / q[i], 0.0), C)
                w += (new - a) * y[i] * Xa[i]
                alpha[i] = new
        if worst < cfg.tol:
            break
    return w[:-1], float(w[-1])


def hinge_objective(w, b, X, y, C) -> float:
    """``0.5 ||w||^2 + C * sum(hinge)`` with labels in {-1, +1}."""
    margins = y * (X @ w + b)
    return 0.5 * float(w @ w) + C * float(np.clip(1.0 - margins, 0, None).sum())


def train_linear(pos, neg, cfg: TrainConfig = TrainConfig(), *, scale_id: int = 0,
                 pyramid: PyramidSpec = PyramidSpec(), size_bias: bool = True,
                 stage: int = 1) -> LinearModel:
    """Fit a linear hinge-loss classifier separating ``pos`` from ``neg`` descriptors."""
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if pos.ndim != 2 or neg.ndim != 2 or len(pos) == 0 or len(neg) == 0:
        raise ValueError("both classes need at least one sample")
    if pos.shape[1] != neg.shape[1]:
        raise ValueError("positive and negative descriptors differ in length")
    X = np.vstack([pos, neg])
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite descriptor")
    y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
    w, b = (_sgd if cfg.solver == "sgd" else _dcd)(X, y, cfg)
    return LinearModel(w, b, scale_id=scale_id, pyramid=pyramid, size_bias=size_bias, stage=stage)


def score(model: LinearModel, descriptor) -> float:
    x = np.asarray(descriptor, dtype=np.float64).ravel()
    if x.shape[0] != model.weights.shape[0]:
        raise ValueError(
            f"descriptor length {x.shape[0]} does not match model ({model.weights.shape[0]})")
    return float(model.weights @ x + model.bias)


def score_batch(model: LinearModel, descriptors) -> np.ndarray:
    X = np.asarray(descriptors, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.weights.shape[0]:
        raise ValueError(
            f"descriptors of shape {X.shape} do not match model ({model.weights.shape[0]})")
    # row-wise sums: identical descriptors must get identical scores, which a
    # BLAS matrix-vector product does not guarantee
    return (X * model.weights).sum(axis=1) + model.bias


def normalize_scores(scores) -> np.ndarray:
    """Affine map of scores onto [0, 1]; a constant list maps to all ones."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("cannot normalize an empty score list")
    lo, hi = s.min(), s.max()
    if hi == lo:
        return np.ones_like(s)
    return (s - lo) / (hi - lo)


class LinearObjectness(ClassifierMixin, BaseEstimator):
    """Linear hinge-loss classifier with a scikit-learn interface.

    ``y`` may use any two labels; the larger one is the object class.
    """

    def __init__(self, C=1.0, epochs=30, learning_rate=0.01, decay=1e-4,
                 solver="sgd", tol=1e-8, max_iter=2000, random_state=0):
        self.C = C
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.decay = decay
        self.solver = solver
        self.tol = tol
        self.max_iter = max_iter
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(C=self.C, epochs=self.epochs, rate0=self.learning_rate,
                           decay=self.decay, seed=self.random_state, solver=self.solver,
                           tol=self.tol, max_iter=self.max_iter)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = np.unique(y)
        if len(self.classes_) != 2:
            raise ValueError("LinearObjectness needs exactly two classes")
        is_pos = y == self.classes_[1]
        model = train_linear(X[is_pos], X[~is_pos], self._config())
        self.coef_ = model.weights.copy()
        self.intercept_ = model.bias
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError("feature count differs from training")
        return X @ self.coef_ + self.intercept_

    def predict(self, X):
        return self.classes_[(self.decision_function(X) > 0).astype(int)]

    def to_model(self, scale_id=0, pyramid=PyramidSpec(), size_bias=True, stage=1) -> LinearModel:
        check_is_fitted(self, "coef_")
        return LinearModel(self.coef_, self.intercept_, scale_id=scale_id,
                           pyramid=pyramid, size_bias=size_bias, stage=stage)
