"""scikit-learn style wrapper around meta-training and few-shot inference.

``fit(X, y)`` meta-trains on base classes; ``set_support(X, y)`` registers
a labelled support set of novel classes; ``predict``/``predict_proba``
classify queries against it and ``transform`` returns flattened embeddings.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .encoder import EncoderConfig
from .episodes import ClassRecord, Dataset
from .errors import DimensionError, EpisodeError
from .model import FewShotModel, ModelConfig
from .trainer import TrainConfig, train


def check_images(X, channels: Optional[int] = None, size: Optional[int] = None) -> np.ndarray:
    """Validate an image batch ``[n, C, H, W]`` (square, finite) and return it as float32."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float32)
    if X.ndim != 4 or X.shape[2] != X.shape[3]:
        raise DimensionError(f"expected square images [n, C, H, W], got shape {X.shape}")
    if channels is not None and X.shape[1] != channels:
        raise DimensionError(f"expected {channels} channels, got {X.shape[1]}")
    if size is not None and X.shape[2] != size:
        raise DimensionError(f"expected {size}x{size} images, got {X.shape[2]}x{X.shape[3]}")
    return X


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise DimensionError(f"expected {n} labels, got shape {y.shape}")
    return y


def dataset_from_arrays(X: np.ndarray, y: np.ndarray, split: str = "train") -> Dataset:
    """Group samples by label; labels are re-indexed to ``0..k-1`` in sorted order."""
    labels = np.unique(y)
    return Dataset([ClassRecord(i, X[y == lab]) for i, lab in enumerate(labels)], split)


class ArfSfrClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    def __init__(self, backbone: str = "conv4_mini", widths=(8, 16, 32, 32), arf_placement: str = "all",
                 branch_mode: str = "both", rho_max: int = 9, sigma_step: int = 2, kappa: float = 0.1,
                 way: int = 5, shot: int = 1, query: int = 5, epochs: int = 20, episodes_per_epoch: int = 50,
                 lr_init: float = 0.1, schedule: str = "cosine", grad_clip: float = 1.0,
                 weight_decay: float = 5e-4, random_state: int = 0):
        self.backbone = backbone
        self.widths = widths
        self.arf_placement = arf_placement
        self.branch_mode = branch_mode
        self.rho_max = rho_max
        self.sigma_step = sigma_step
        self.kappa = kappa
        self.way = way
        self.shot = shot
        self.query = query
        self.epochs = epochs
        self.episodes_per_epoch = episodes_per_epoch
        self.lr_init = lr_init
        self.schedule = schedule
        self.grad_clip = grad_clip
        self.weight_decay = weight_decay
        self.random_state = random_state

    def _model_config(self, channels: int, size: int) -> ModelConfig:
        return ModelConfig(EncoderConfig(
            backbone=self.backbone, widths=tuple(self.widths), arf_placement=self.arf_placement,
            branch_mode=self.branch_mode, rho_max=self.rho_max, sigma_step=self.sigma_step,
            kappa=self.kappa, image_size=size, in_channels=channels))

    def fit(self, X, y):
        """Meta-train on the labelled base classes in ``(X, y)``."""
        X = check_images(X)
        y = check_labels(y, len(X))
        data = dataset_from_arrays(X, y)
        if data.num_classes < self.way:
            raise EpisodeError(f"{self.way}-way training needs {self.way} classes, got {data.num_classes}")
        config = TrainConfig(way=self.way, shot=self.shot, query=self.query, epochs=self.epochs,
                             episodes_per_epoch=self.episodes_per_epoch, lr_init=self.lr_init,
                             schedule=self.schedule, lr_min=self.lr_init * 0.01, grad_clip=self.grad_clip,
                             weight_decay=self.weight_decay, val_every=0, seed=self.random_state)
        self.model_ = FewShotModel(self._model_config(X.shape[1], X.shape[2]), seed=self.random_state)
        _, self.train_log_ = train(self.model_, {"train": data}, config)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.support_ = None
        return self

    def transform(self, X) -> np.ndarray:
        """Flattened eval-mode embeddings ``[n, C*h*w]``."""
        check_is_fitted(self, "model_")
        enc = self.model_.config.encoder
        X = check_images(X, enc.in_channels, enc.image_size)
        feats = self.model_.embed(X)
        return feats.reshape(len(feats), -1)

    def set_support(self, X, y):
        """Register the labelled support set the next predictions are made against."""
        check_is_fitted(self, "model_")
        enc = self.model_.config.encoder
        X = check_images(X, enc.in_channels, enc.image_size)
        y = check_labels(y, len(X))
        classes, counts = np.unique(y, return_counts=True)
        if len(classes) < 2:
            raise EpisodeError("a support set needs at least two classes")
        if len(set(counts.tolist())) != 1:
            raise EpisodeError("every support class needs the same number of samples")
        feats = self.model_.embed(X)
        self.classes_ = classes
        self.support_ = np.stack([feats[y == c] for c in classes])
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        if getattr(self, "support_", None) is None:
            raise EpisodeError("call set_support before predicting")
        enc = self.model_.config.encoder
        query = self.model_.embed(check_images(X, enc.in_channels, enc.image_size))
        return self.model_.probabilities_from_features(self.support_, query)

    def predict(self, X) -> np.ndarray:
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
