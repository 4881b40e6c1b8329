"""Scikit-learn front end for the channel-correlation classifier."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import datasets as data
from .autodiff import Tensor, no_grad
from .training import TrainConfig, train


class ChannelCorrelationClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """MLP classifier with a channel-attention head and a correlation penalty.

    Fits a small relu network whose hidden activations are gated by a
    per-sample attention vector in (0, 1); training minimizes cross-entropy
    plus ``lam`` times the ratio of same-class to different-class pairwise
    squared distances between attention vectors. ``transform`` exposes the
    fitted attention vectors as an embedding, so the estimator drops into
    pipelines as either a classifier or a feature extractor.

    Parameters
    ----------
    hidden_dim : width of the gated hidden layer (the attention dimension).
    mlp_width : width of the backbone layer feeding the head.
    lam : weight of the intra/inter distance ratio; 0 recovers plain CE.
    epsilon : stabilizer added to the inter-class sum in the ratio.
    epochs, batch_size, lr_init, lr_final, momentum, weight_decay :
        SGD schedule (cosine-annealed learning rate).
    loss_mode : "cc", "ce_cam", or "ce_plain".
    seed : controls init, shuffling, and therefore the whole trajectory.

    Attributes
    ----------
    classes_ : original class labels, in sorted order.
    model_ : the fitted network.
    log_ : per-epoch training metrics.
    """

    def __init__(
        self,
        hidden_dim: int = 32,
        mlp_width: int = 64,
        lam: float = 1.0,
        epsilon: float = 1e-6,
        epochs: int = 15,
        batch_size: int = 32,
        lr_init: float = 0.1,
        lr_final: float = 1e-5,
        momentum: float = 0.9,
        weight_decay: float = 5e-4,
        loss_mode: str = "cc",
        seed: int = 0,
    ):
        self.hidden_dim = hidden_dim
        self.mlp_width = mlp_width
        self.lam = lam
        self.epsilon = epsilon
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_init = lr_init
        self.lr_final = lr_final
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.loss_mode = loss_mode
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(
            dataset="synth",  # datasets are passed in explicitly
            backbone="mlp",
            loss_mode=self.loss_mode,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_init=self.lr_init,
            lr_final=self.lr_final,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            lam=self.lam,
            eps=self.epsilon,
            seed=self.seed,
            hidden_dim=self.hidden_dim,
            mlp_width=self.mlp_width,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least 2 classes")
        self.n_features_in_ = X.shape[1]
        self.input_mean_ = (float(X.mean()),)
        self.input_scale_ = (float(X.std()) or 1.0,)
        ds = data.LabeledDataset(
            images=X.astype(np.float32).reshape(len(X), 1, X.shape[1], 1),
            labels=encoded.astype(np.int64),
            class_count=len(self.classes_),
            mean=self.input_mean_,
            std=self.input_scale_,
            name="array",
        )
        result = train(self._config(), train_ds=ds, test_ds=None)
        self.model_ = result.model
        self.log_ = result.log
        return self

    def _inputs(self, X) -> Tensor:
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        images = X.astype(np.float32).reshape(len(X), 1, X.shape[1], 1)
        return Tensor(data.normalize_images(images, self.input_mean_, self.input_scale_))

    def decision_function(self, X) -> np.ndarray:
        inputs = self._inputs(X)
        with no_grad():
            if self.loss_mode == "ce_plain":
                return self.model_.forward_plain(inputs).data.copy()
            logits, _ = self.model_.forward_cam(inputs)
            return logits.data.copy()

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def transform(self, X) -> np.ndarray:
        """Per-sample channel-attention vectors, each entry in (0, 1)."""
        inputs = self._inputs(X)
        with no_grad():
            return self.model_.attention(inputs).data.copy()
