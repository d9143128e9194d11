"""scikit-learn style front end for the screened part-feature model."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, column_or_1d

from .evaluation import compute_embeddings
from .exceptions import ShapeError
from .training import TrainConfig, TrainingData, fit_model


def check_images(X, input_size=None) -> np.ndarray:
    """Validate an ``N x H x W x 3`` float image batch with values in ``[0, 1]``."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_all_finite=True)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ShapeError(f"expected images shaped (N, H, W, 3), got {X.shape}")
    if input_size is not None and tuple(X.shape[1:3]) != tuple(input_size):
        raise ShapeError(f"expected {tuple(input_size)} images, got {X.shape[1:3]}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return X


class OC4ReID(TransformerMixin, BaseEstimator):
    """Occlusion-robust cloth-changing re-identification embedder.

    ``fit(X, y, clothes=...)`` trains on images ``X`` (N x H x W x 3 in
    [0, 1]) with identity labels ``y`` and optional clothes labels;
    ``transform`` returns L2-normalised screened embeddings; ``predict``
    returns the identity classifier's decision on the pooled feature.
    """

    def __init__(self, k=6, lam=0.35, margin=0.3, reduction=4, P=8, K=4, epochs=10, batches_per_epoch=50,
                 lr=1e-3, lr_decay_epochs=(8,), adversarial_epoch=5, t2mgs=True, prt=True,
                 classic_triplet=False, channels=64, feature_height=12, seed=0):
        self.k = k
        self.lam = lam
        self.margin = margin
        self.reduction = reduction
        self.P = P
        self.K = K
        self.epochs = epochs
        self.batches_per_epoch = batches_per_epoch
        self.lr = lr
        self.lr_decay_epochs = lr_decay_epochs
        self.adversarial_epoch = adversarial_epoch
        self.t2mgs = t2mgs
        self.prt = prt
        self.classic_triplet = classic_triplet
        self.channels = channels
        self.feature_height = feature_height
        self.seed = seed

    def _config(self, input_size) -> TrainConfig:
        return TrainConfig(
            input_size=tuple(input_size), P=self.P, K=self.K, base_lr=self.lr,
            lr_decay_epochs=tuple(self.lr_decay_epochs), total_epochs=self.epochs, k=self.k, lam=self.lam,
            M=self.margin, r=self.reduction, E_adv=self.adversarial_epoch, t2mgs=self.t2mgs, prt=self.prt,
            classic_triplet=self.classic_triplet, channels=self.channels, feature_height=self.feature_height,
            batches_per_epoch=self.batches_per_epoch, seed=self.seed,
        )

    def fit(self, X, y, clothes=None):
        X = check_images(X)
        y = column_or_1d(y)
        if len(y) != len(X):
            raise ShapeError(f"{len(X)} images but {len(y)} labels")
        # without clothes labels every identity is treated as wearing one outfit
        clothes = y if clothes is None else column_or_1d(clothes)
        self.classes_ = np.unique(y)
        self.config_ = self._config(X.shape[1:3])
        data = TrainingData.from_arrays(X, y, clothes)
        self.model_, self.log_ = fit_model(self.config_, data)
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, self.config_.input_size)
        return compute_embeddings(self.model_, X, np.zeros((len(X), 3)), self.lam).vectors

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, self.config_.input_size)
        self.model_.eval()
        with torch.no_grad():
            _, logits, _, _ = self.model_.forward_train(torch.from_numpy(np.ascontiguousarray(X.transpose(0, 3, 1, 2))))
        return self.classes_[logits.argmax(dim=1).numpy()]
