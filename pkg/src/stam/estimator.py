"""scikit-learn compatible wrapper around the STAM classifier."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.validation import check_is_fitted

from stam.errors import ConfigurationError
from stam.training.core import TrainConfig, fit_arrays, predict_logits
from stam.validation import check_labels, check_sequences


class STAMClassifier(ClassifierMixin, BaseEstimator):
    """Classify tactile frame sequences ``[B, n, H, W(, 1)]``.

    Parameters mirror :class:`stam.training.TrainConfig`. A stratified
    ``validation_fraction`` of the training data drives model selection and
    early stopping; set it to 0 to train for exactly ``epochs`` epochs.

    Attributes
    ----------
    classes_ : ndarray of the distinct labels seen in ``fit``
    params_ : the trained :class:`stam.model.StamParams`
    history_ : per-epoch :class:`stam.training.EpochMetrics`
    """

    def __init__(self, variant="full-stam", n_heads=10, head_dim=None, widths=(8, 16, 32),
                 hidden=(), lr=0.01, momentum=0.9, batch_size=16, epochs=60, patience=10,
                 validation_fraction=0.2, random_state=0):
        self.variant = variant
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.widths = widths
        self.hidden = hidden
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _train_config(self, n_frames: int) -> TrainConfig:
        return TrainConfig(lr=self.lr, momentum=self.momentum, batch_size=self.batch_size,
                           epochs=self.epochs, seed=int(self.random_state or 0), n=n_frames,
                           variant=self.variant, n_heads=self.n_heads, patience=self.patience,
                           widths=tuple(self.widths), head_dim=self.head_dim,
                           hidden=tuple(self.hidden))

    def fit(self, X, y):
        X = check_sequences(X)
        y = check_labels(y, len(X))
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ConfigurationError("need at least two classes to fit")
        config = self._train_config(X.shape[1])
        model_config = config.model_config(len(self.classes_), X.shape[2:4])
        if self.validation_fraction and self.validation_fraction > 0:
            train_x, val_x, train_y, val_y = train_test_split(
                X, encoded, test_size=self.validation_fraction, stratify=encoded,
                random_state=config.seed)
        else:
            train_x, train_y, val_x, val_y = X, encoded, None, None
        result = fit_arrays(model_config, train_x, train_y, val_x, val_y, config)
        self.params_ = result.params
        self.history_ = result.history
        self.n_frames_ = X.shape[1]
        self.frame_size_ = tuple(X.shape[2:4])
        return self

    def decision_function(self, X):
        """Raw class logits ``[B, n_classes]``."""
        check_is_fitted(self, "params_")
        X = check_sequences(X, self.n_frames_, self.frame_size_)
        return predict_logits(self.params_, X)

    def predict_proba(self, X):
        logits = self.decision_function(X)
        shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
        return shifted / shifted.sum(axis=1, keepdims=True)

    def predict(self, X):
        logits = self.decision_function(X)
        return self.classes_[np.argmax(logits, axis=1)]
