"""Encoder plus metric head bundled as one trainable few-shot classifier."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .encoder import Encoder, EncoderConfig, format_placement
from .episodes import Episode
from .errors import ConfigurationError, DimensionError
from .layers import ParamStore
from .similarity import LAMBDA_INIT, MetricParams, episode_distances, episode_loss
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    proj_dim: Optional[int] = None
    lambda_init: float = LAMBDA_INIT

    def __post_init__(self):
        if self.proj_dim is not None and self.proj_dim < 1:
            raise ConfigurationError("proj_dim must be positive")
        if self.lambda_init <= 0:
            raise ConfigurationError("lambda_init must be > 0")

    def canonical(self) -> str:
        """Stable text form of everything that determines tensor names and shapes."""
        enc = self.encoder
        parts = []
        for f in fields(enc):
            value = getattr(enc, f.name)
            if f.name == "arf_placement":
                value = format_placement(value)
            elif f.name == "widths":
                value = ",".join(str(w) for w in value)
            parts.append(f"encoder.{f.name}={value}")
        parts.append(f"metric.proj_dim={self.proj_dim or enc.widths[-1]}")
        return "\n".join(parts)

    def hash(self) -> bytes:
        return hashlib.sha256(self.canonical().encode("utf-8")).digest()


class FewShotModel:
    """Embedding network and bidirectional reconstruction metric over one :class:`ParamStore`."""

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32):
        self.config = config
        self.seed = seed
        self.store = ParamStore(dtype)
        self.encoder = Encoder(config.encoder, seed, self.store)
        channels = config.encoder.widths[-1]
        self.metric = MetricParams(self.store, channels, config.proj_dim,
                                   np.random.default_rng([seed, 1]), config.lambda_init)

    @property
    def params(self):
        return self.store.params

    def features(self, images, training: bool = False, probe: Optional[dict] = None) -> Tensor:
        return self.encoder.forward(images, training, probe)

    def _split(self, feats: Tensor, way: int, shot: int) -> tuple:
        n_support = way * shot
        support = feats[:n_support].reshape((way, shot) + feats.shape[1:])
        return support, feats[n_support:]

    def episode_loss(self, episode: Episode, training: bool = True) -> Tensor:
        """Cross-entropy over the episode's queries, support and query encoded in one batch."""
        images = np.concatenate([episode.support, episode.query], axis=0)
        feats = self.features(images, training)
        support, query = self._split(feats, episode.way, episode.shot)
        return episode_loss(query, support, episode.query_labels, self.metric)

    def distances_from_features(self, support: np.ndarray, query: np.ndarray) -> np.ndarray:
        """``support [N, K, C, h, w]``, ``query [Nq, C, h, w]`` -> ``[Nq, N]`` (no grad)."""
        with no_grad():
            return episode_distances(Tensor(query), Tensor(support), self.metric).data

    def probabilities_from_features(self, support: np.ndarray, query: np.ndarray) -> np.ndarray:
        d = self.distances_from_features(support, query).astype(np.float64)
        z = -d - (-d).max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def embed(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Eval-mode embeddings ``[n, C, h, w]``; eval batch norm is per-sample so batching is free."""
        images = np.asarray(images)
        if images.ndim != 4:
            raise DimensionError(f"embed expects [n, C, H, W], got {images.shape}")
        out = []
        with no_grad():
            for start in range(0, len(images), batch_size):
                out.append(self.features(images[start:start + batch_size], training=False).data)
        return np.concatenate(out, axis=0)

    def predict_proba(self, episode: Episode) -> np.ndarray:
        """Class probabilities ``[Nq, N]`` for the queries of ``episode``."""
        feats = self.embed(np.concatenate([episode.support, episode.query], axis=0))
        n_support = episode.way * episode.shot
        support = feats[:n_support].reshape((episode.way, episode.shot) + feats.shape[1:])
        return self.probabilities_from_features(support, feats[n_support:])

    def prepare(self, dataset):
        """Embed every sample of ``dataset`` once; return ``episode -> probabilities``.

        Episodes must come from ``dataset`` (their index arrays address it).
        """
        images, _, offsets = dataset.stacked()
        cache = self.embed(images)

        def probabilities(episode: Episode) -> np.ndarray:
            s_rows = offsets[episode.support_index[..., 0]] + episode.support_index[..., 1]
            q_rows = offsets[episode.query_index[..., 0]] + episode.query_index[..., 1]
            return self.probabilities_from_features(cache[s_rows], cache[q_rows.reshape(-1)])

        return probabilities

    def state(self) -> dict:
        return self.store.state()

    def load_state(self, tensors: dict) -> None:
        self.store.load_state(tensors)
