"""Scikit-learn estimator wrapper around the sparsifying trainer, so the
engine composes with sklearn pipelines and model selection."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import graph as graph_mod
from .data import DatasetHandle
from .errors import ConfigurationError, DimensionError
from .trainer import HyperParams, train


def _as_image_batch(X, input_shape):
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 2:
        if X.shape[1] != int(np.prod(input_shape)):
            raise DimensionError(
                f"flattened X has {X.shape[1]} features; expected "
                f"{int(np.prod(input_shape))} for input shape {tuple(input_shape)}"
            )
        X = X.reshape((X.shape[0],) + tuple(input_shape))
    if X.ndim != 4 or X.shape[1:] != tuple(input_shape):
        raise DimensionError(
            f"X must be (n, {input_shape[0]}, {input_shape[1]}, {input_shape[2]}) "
            f"or flattened; got {X.shape}"
        )
    return X


class PrunedCNNClassifier(BaseEstimator, ClassifierMixin):
    """CNN classifier that sparsifies with channel-wise group lasso from
    the first iteration and periodically prunes itself during fit.

    Parameters mirror the trainer's hyperparameters; `arch` selects the
    toy model family ("resnet" with `stages`, "vgg" with `widths`).
    """

    def __init__(self, arch="resnet", stages=((1, 8),), widths=(8, 8),
                 input_shape=(3, 32, 32), target_lasso_ratio=0.2,
                 threshold=1e-4, reconfig_interval=10, batch_size=64,
                 lr=0.1, momentum=0.9, epochs=10, memory_budget=None,
                 batch_granularity=32, seed=0, dtype="float32",
                 bottleneck=False):
        self.arch = arch
        self.stages = stages
        self.widths = widths
        self.input_shape = input_shape
        self.target_lasso_ratio = target_lasso_ratio
        self.threshold = threshold
        self.reconfig_interval = reconfig_interval
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.epochs = epochs
        self.memory_budget = memory_budget
        self.batch_granularity = batch_granularity
        self.seed = seed
        self.dtype = dtype
        self.bottleneck = bottleneck

    def _build(self, classes):
        if self.arch == "resnet":
            return graph_mod.build_toy_resnet(
                [tuple(s) for s in self.stages], input_shape=self.input_shape,
                classes=classes, bottleneck=self.bottleneck,
                dtype=self.dtype, seed=self.seed)
        if self.arch == "vgg":
            return graph_mod.build_toy_vgg(
                list(self.widths), input_shape=self.input_shape,
                classes=classes, dtype=self.dtype, seed=self.seed)
        raise ConfigurationError(f"unknown arch {self.arch!r}")

    def fit(self, X, y):
        X = _as_image_batch(X, self.input_shape)
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise DimensionError(f"y shape {y.shape} != ({X.shape[0]},)")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        g = self._build(len(self.classes_))
        hp = HyperParams(
            target_lasso_ratio=self.target_lasso_ratio,
            threshold=self.threshold,
            reconfig_interval=self.reconfig_interval,
            batch_size=min(self.batch_size, X.shape[0]),
            lr=self.lr, momentum=self.momentum, epochs=self.epochs,
            memory_budget=self.memory_budget,
            batch_granularity=self.batch_granularity, seed=self.seed,
        )
        ds = DatasetHandle(images=X, labels=y_idx,
                           mean=np.zeros(X.shape[1], dtype=np.float32),
                           std=np.ones(X.shape[1], dtype=np.float32))
        empty = ds.subset(0, 0)
        self.state_ = train(g, hp, ds, empty)
        self.graph_ = self.state_.graph
        return self

    def decision_function(self, X):
        check_is_fitted(self, "graph_")
        X = _as_image_batch(X, self.input_shape)
        return graph_mod.forward(self.graph_, X.astype(self.graph_.np_dtype),
                                 training=False)

    def predict(self, X):
        check_is_fitted(self, "classes_")
        return self.classes_[self.decision_function(X).argmax(axis=1)]
