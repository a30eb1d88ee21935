"""scikit-learn style wrapper around the training loop."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .encoder import EncoderConfig, FrozenWeights
from .errors import DataError
from .training import TrainConfig, UDADataset, train


class PDAClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Prompt-tuned dual-encoder classifier adapted to an unlabeled target set.

    Parameters
    ----------
    weights : FrozenWeights, optional
        Frozen encoder.  When omitted one is seeded from ``encoder_config``
        with ``class_embeddings`` as class-token rows.
    kind : {"raw", "embedding"}
        ``raw`` rows are flattened ``n_patches x d_model`` patch features;
        ``embedding`` rows are precomputed ``d_proj`` image features.
    tau, gamma, beta1, beta2, lr, epochs, batch_size, shots, warmup_epochs,
    ensemble_weight, seed
        Forwarded to :class:`TrainConfig`.

    Attributes
    ----------
    classes_ : ndarray of shape (n_classes,)
    model_ : PDAModel
    state_ : CheckpointState
    history_ : list of per-epoch loss summaries
    """

    def __init__(self, weights=None, encoder_config=None, class_embeddings=None, kind="raw",
                 tau=0.8, gamma=1.0, beta1=0.1, beta2=0.1, lr=0.003, epochs=10,
                 batch_size=32, shots=5, warmup_epochs=0, ensemble_weight=0.5, seed=0):
        self.weights = weights
        self.encoder_config = encoder_config
        self.class_embeddings = class_embeddings
        self.kind = kind
        self.tau = tau
        self.gamma = gamma
        self.beta1 = beta1
        self.beta2 = beta2
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.shots = shots
        self.warmup_epochs = warmup_epochs
        self.ensemble_weight = ensemble_weight
        self.seed = seed

    def _train_config(self, enc):
        return TrainConfig(
            tau=self.tau, gamma=self.gamma, beta1=self.beta1, beta2=self.beta2,
            temperature=enc.temperature, lr=self.lr, epochs=self.epochs,
            batch_size=self.batch_size, shots=self.shots, context_length=enc.context_length,
            warmup_epochs=self.warmup_epochs, ensemble_weight=self.ensemble_weight,
            seed=self.seed)

    def _weights(self, n_classes):
        if self.weights is not None:
            if self.weights.n_classes != n_classes:
                raise DataError(f"encoder has {self.weights.n_classes} class tokens, "
                                f"data has {n_classes} classes")
            return self.weights
        enc = self.encoder_config or EncoderConfig()
        return FrozenWeights.init(enc, n_classes, self.class_embeddings)

    def _inputs(self, X, enc):
        X = check_array(X, dtype=np.float64)
        if self.kind == "embedding":
            if X.shape[1] != enc.d_proj:
                raise DataError(f"expected {enc.d_proj} embedding columns, got {X.shape[1]}")
            return X
        if self.kind != "raw":
            raise DataError(f"unknown kind {self.kind!r}")
        width = enc.n_patches * enc.d_model
        if X.shape[1] != width:
            raise DataError(f"expected {width} columns (n_patches * d_model), got {X.shape[1]}")
        return X.reshape(len(X), enc.n_patches, enc.d_model)

    def fit(self, X, y, X_target=None):
        """Train on labeled ``(X, y)`` and unlabeled ``X_target``."""
        y = np.asarray(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        weights = self._weights(len(self.classes_))
        enc = weights.config
        Xs = self._inputs(X, enc)
        if X_target is None:
            Xt = Xs[:0]
        else:
            Xt = self._inputs(X_target, enc)
        if len(Xs) != len(y):
            raise DataError(f"X has {len(Xs)} rows, y has {len(y)}")
        data = UDADataset(Xs, y_idx, Xt, len(self.classes_), self.kind)
        result = train(data, self._train_config(enc), weights)
        self.model_ = result.model
        self.state_ = result.state
        self.history_ = result.epochs
        self.n_features_in_ = np.asarray(X).shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict_proba(self._inputs(X, self.model_.weights.config),
                                         self.ensemble_weight)

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def transform(self, X):
        """Unit-norm image features from the prompted image tower."""
        check_is_fitted(self, "model_")
        return self.model_.image_features_np(self._inputs(X, self.model_.weights.config))
