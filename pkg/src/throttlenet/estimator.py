"""scikit-learn style wrapper around a throttleable network."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .architectures import ArchConfig, build_network
from .data import Dataset
from .evaluation import DEFAULT_GRID, STRATEGIES, SweepSpec, evaluate_at, predict_logits, sweep
from .strategies import ControllerParams, learned_plan, static_plan
from .training import TrainConfig, train_controller, train_datapath


def _as_images(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        return X[:, None, None, :]
    if X.ndim == 3:
        return X[:, None]
    return X


class ThrottleableClassifier(ClassifierMixin, BaseEstimator):
    """Classifier whose compute is chosen at prediction time by ``u``.

    ``fit`` trains the data path under random gating; ``fit_controller``
    optionally learns a gate controller on top.  ``predict`` uses the
    ``strategy`` and ``u`` parameters, which may be changed after fitting
    with ``set_params``.  ``X`` may be flat features ``(n, d)``, grayscale
    images ``(n, H, W)`` or ``(n, C, H, W)``.
    """

    def __init__(self, arch="t-mlp", n_components=8, widths=None, blocks=None, group_width=4,
                 gating="nested", epochs=30, batch_size=64, lr=0.05, u=1.0, strategy="nested",
                 controller_epochs=20, estimator="concrete", lam=10.0, seed=0):
        self.arch = arch
        self.n_components = n_components
        self.widths = widths
        self.blocks = blocks
        self.group_width = group_width
        self.gating = gating
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.u = u
        self.strategy = strategy
        self.controller_epochs = controller_epochs
        self.estimator = estimator
        self.lam = lam
        self.seed = seed

    def _dataset(self, X, y) -> Dataset:
        X, y = check_X_y(X, y, allow_nd=True)
        return Dataset(_as_images(X), np.searchsorted(self.classes_, y), len(self.classes_))

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True)
        self.classes_ = np.unique(y)
        images = _as_images(X)
        cfg = ArchConfig(self.arch, n_components=self.n_components,
                         widths=None if self.widths is None else tuple(self.widths),
                         blocks=None if self.blocks is None else tuple(self.blocks),
                         group_width=self.group_width, input_shape=images.shape[1:],
                         n_classes=len(self.classes_), seed=self.seed)
        self.network_ = build_network(cfg)
        self.n_features_in_ = int(np.prod(images.shape[1:]))
        train_cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                                gating=self.gating, seed=self.seed)
        self.history_ = train_datapath(self.network_, Dataset(images, np.searchsorted(self.classes_, y),
                                                              len(self.classes_)), train_cfg).epochs
        self.controller_ = None
        return self

    def fit_controller(self, X, y):
        check_is_fitted(self, "network_")
        ds = self._dataset(X, y)
        psi = ControllerParams.init(self.network_.n_gates, rng=np.random.default_rng([self.seed, 3]))
        cfg = TrainConfig.controller_defaults(epochs=self.controller_epochs, estimator=self.estimator,
                                              lam=self.lam, batch_size=self.batch_size, seed=self.seed,
                                              lr=1e-2)
        train_controller(self.network_, psi, ds, cfg)
        self.controller_ = psi
        return self

    def _plan(self):
        if self.strategy not in STRATEGIES or self.strategy == "independent":
            raise ValueError(f"predict needs a deterministic strategy, got {self.strategy!r}")
        if self.strategy == "learned":
            if self.controller_ is None:
                raise ValueError("strategy 'learned' needs fit_controller first")
            return learned_plan(self.network_, self.controller_, self.u)
        return static_plan(self.network_, self.strategy, self.u)

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        X = check_array(X, allow_nd=True)
        return predict_logits(self.network_, _as_images(X), self._plan())

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def utilization(self) -> float:
        check_is_fitted(self, "network_")
        return self.network_.utilization(self._plan())

    def sweep(self, X, y, grid=DEFAULT_GRID, strategy: str | None = None):
        check_is_fitted(self, "network_")
        spec = SweepSpec(grid=tuple(grid), strategy=strategy or self.strategy, seed=self.seed)
        return sweep(self.network_, spec, self._dataset(X, y), controller=self.controller_)

    def evaluate(self, X, y, u: float | None = None):
        check_is_fitted(self, "network_")
        return evaluate_at(self.network_, self.strategy, self.u if u is None else u, self._dataset(X, y),
                           controller=self.controller_)
