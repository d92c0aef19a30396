"""scikit-learn compatible wrappers around the network and the dreamer."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from . import netgraph
from .dreamer import DreamConfig, batch_outcomes, run_dream
from .exceptions import ParameterError
from .netgraph import Injection, ModelGraph, NodeRef
from .toyscene import sgd_train
from .validation import check_images, check_is_fitted, check_labels


class ConvNetClassifier(ClassifierMixin, BaseEstimator):
    """Train a sequential conv net with plain minibatch SGD.

    Parameters
    ----------
    arch : str, default="rfnet-64"
        Registered architecture name; fixes the expected image shape.
    epochs : int, default=10
    lr : float, default=0.01
    batch_size : int, default=32
    init_seed : int, default=0
        Seed of the He-uniform parameter initialisation.
    shuffle_seed : int, default=0
        Seed of the per-epoch minibatch permutation.

    Attributes
    ----------
    model_ : ModelGraph
    classes_ : ndarray of shape (n_classes,)
    loss_curve_ : list of float
    """

    def __init__(self, arch="rfnet-64", epochs=10, lr=0.01, batch_size=32, init_seed=0,
                 shuffle_seed=0):
        self.arch = arch
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.init_seed = init_seed
        self.shuffle_seed = shuffle_seed

    def fit(self, X, y):
        input_shape = netgraph.ARCHITECTURES[self.arch][0] if self.arch in netgraph.ARCHITECTURES \
            else None
        if input_shape is None:
            raise ParameterError(f"unknown architecture {self.arch!r}")
        X = check_images(X, input_shape)
        y = check_labels(y, X.shape[0])
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ParameterError("need samples of at least two classes")
        model = netgraph.build(self.arch, len(self.classes_), self.init_seed)
        self.model_, self.loss_curve_ = sgd_train(model, X, encoded, self.epochs, self.lr,
                                                  self.shuffle_seed, self.batch_size)
        self.n_features_in_ = int(np.prod(input_shape))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.input_shape)
        return netgraph.predict_logits(self.model_, X)

    def predict_proba(self, X):
        z = self.decision_function(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]


def _resolve_model(model) -> ModelGraph:
    if isinstance(model, ModelGraph):
        return model
    if isinstance(model, ConvNetClassifier):
        check_is_fitted(model, "model_")
        return model.model_
    raise ParameterError("model must be a ModelGraph or a fitted ConvNetClassifier")


class ActivationMaximizer(TransformerMixin, BaseEstimator):
    """Turn start images into preferred inputs of a node or a whole channel.

    ``transform`` runs gradient ascent from each row of ``X``; ``sample``
    starts from seeded noise instead.  With ``position=None`` the channel is
    tiled over all of its positions.

    Parameters
    ----------
    model : ModelGraph or fitted ConvNetClassifier
    layer : int
        Index of the layer whose output holds the target (1-based).
    channel : int
    position : (row, col) or None
    step_size, max_iters, stability_tol, jitter_radius, seed
        Ascent settings, see :class:`rfdream.dreamer.DreamConfig`.
    """

    def __init__(self, model=None, layer=1, channel=0, position=None, step_size=0.05,
                 max_iters=512, stability_tol=1e-4, jitter_radius=0, seed=0):
        self.model = model
        self.layer = layer
        self.channel = channel
        self.position = position
        self.step_size = step_size
        self.max_iters = max_iters
        self.stability_tol = stability_tol
        self.jitter_radius = jitter_radius
        self.seed = seed

    def fit(self, X=None, y=None):
        model = _resolve_model(self.model)
        if self.position is None:
            inj = Injection.tiled(self.layer, self.channel)
        else:
            inj = Injection.node(NodeRef(self.layer, self.channel, *self.position))
        inj.seed(model.shapes)
        self.model_ = model
        self.injection_ = inj
        self.config_ = DreamConfig(step_size=self.step_size, max_iters=self.max_iters,
                                   stability_tol=self.stability_tol,
                                   jitter_radius=self.jitter_radius, seed=self.seed)
        self.n_features_in_ = int(np.prod(model.input_shape))
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.input_shape, (0.0, 1.0))
        self.outcomes_ = [run_dream(self.model_, self.injection_, self.config_, init=x[None])
                          for x in X]
        return np.concatenate([o.image for o in self.outcomes_])

    def sample(self, n_samples=3):
        """Dream from ``n_samples`` seeded noise images; returns their results."""
        check_is_fitted(self, "model_")
        self.outcomes_ = batch_outcomes(self.model_, self.injection_, self.config_, n_samples)
        return np.concatenate([o.image for o in self.outcomes_])

    def score(self, X, y=None):
        """Mean final objective over the images produced from ``X``."""
        self.transform(X)
        return float(np.mean([o.final_objective for o in self.outcomes_]))
