"""Bidirectional attention-reconstruction metric and episode classifier.

For a query ``q`` (``m`` tokens) and class ``r`` (``K*m`` support tokens),
the query is rebuilt from the support values by scaled dot-product
attention and vice versa.  The class dissimilarity is

    d_r = lambda1 * ||q_V - q_hat_r||_F^2 + lambda2 * ||s_V - s_hat_r||_F^2

with ``lambda = softplus(raw)`` and ``P(y = r) = softmax(-d)_r``.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import functional as F
from .errors import DimensionError, EpisodeError
from .layers import ParamStore
from .tensor import Tensor, stack

LAMBDA_INIT = 0.5


def inverse_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


class MetricParams:
    """Shared Q/K/V projections ``[C, d_g]`` and the two raw combination weights."""

    def __init__(self, store: ParamStore, channels: int, proj_dim: Optional[int] = None,
                 rng: Optional[np.random.Generator] = None, lambda_init: float = LAMBDA_INIT):
        rng = rng if rng is not None else np.random.default_rng(0)
        d = proj_dim or channels
        self.channels = channels
        self.proj_dim = d
        scale = 1.0 / np.sqrt(channels)
        self.wq = store.add_param("metric.wq", rng.normal(0.0, scale, (channels, d)))
        self.wk = store.add_param("metric.wk", rng.normal(0.0, scale, (channels, d)))
        self.wv = store.add_param("metric.wv", rng.normal(0.0, scale, (channels, d)))
        raw = inverse_softplus(lambda_init)
        self.raw_lambda1 = store.add_param("metric.raw_lambda1", np.array([raw]))
        self.raw_lambda2 = store.add_param("metric.raw_lambda2", np.array([raw]))

    def lambdas(self) -> tuple:
        return F.softplus(self.raw_lambda1), F.softplus(self.raw_lambda2)


def tokenize(feature: Tensor) -> Tensor:
    """``[C, h, w] -> [h*w, C]`` (or batched ``[B, C, h, w] -> [B, h*w, C]``), row-major."""
    if feature.ndim == 3:
        c, h, w = feature.shape
        return feature.reshape((c, h * w)).transpose((1, 0))
    if feature.ndim == 4:
        b, c, h, w = feature.shape
        return feature.reshape((b, c, h * w)).transpose((0, 2, 1))
    raise DimensionError(f"tokenize expects [C,h,w] or [B,C,h,w], got {feature.shape}")


def untokenize(tokens: Tensor, height: int, width: int) -> Tensor:
    if tokens.ndim == 2:
        return tokens.transpose((1, 0)).reshape((tokens.shape[1], height, width))
    b, _, c = tokens.shape
    return tokens.transpose((0, 2, 1)).reshape((b, c, height, width))


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return t.transpose(tuple(axes))


def _attend(queries: Tensor, keys: Tensor, values: Tensor) -> tuple:
    d = queries.shape[-1]
    weights = F.softmax((queries @ _swap_last(keys)) * (1.0 / np.sqrt(d)), axis=-1)
    return weights @ values, weights


def _check_tokens(q: Tensor, s: Tensor, params: MetricParams) -> None:
    if q.shape[-1] != params.channels or s.shape[-1] != params.channels:
        raise DimensionError(
            f"token width must equal projection input {params.channels}; got {q.shape[-1]} and {s.shape[-1]}")


def reconstruct(q: Tensor, class_support: Tensor, params: MetricParams, return_attention: bool = False):
    """Query rebuilt from support values and support rebuilt from query values.

    ``q`` is ``[m, C]`` and ``class_support`` ``[K*m, C]``.  Returns
    ``(q_hat [m, d_g], s_hat [K*m, d_g])``.
    """
    _check_tokens(q, class_support, params)
    q_q, q_k, q_v = q @ params.wq, q @ params.wk, q @ params.wv
    s_q, s_k, s_v = class_support @ params.wq, class_support @ params.wk, class_support @ params.wv
    q_hat, attn_q = _attend(q_q, s_k, s_v)
    s_hat, attn_s = _attend(s_q, q_k, q_v)
    if return_attention:
        return q_hat, s_hat, attn_q, attn_s
    return q_hat, s_hat


def class_dissimilarity(q: Tensor, class_support: Tensor, params: MetricParams) -> Tensor:
    q_hat, s_hat = reconstruct(q, class_support, params)
    lam1, lam2 = params.lambdas()
    d_q = ((q @ params.wv - q_hat) ** 2).sum()
    d_s = ((class_support @ params.wv - s_hat) ** 2).sum()
    return (lam1 * d_q + lam2 * d_s).reshape(())


def probabilities_from_distances(distances: Tensor) -> Tensor:
    return F.softmax(-distances, axis=-1)


def classify(query_feature: Tensor, support_features: Sequence[Tensor], params: MetricParams) -> Tensor:
    """Class probabilities ``[N]`` for one query map given per-class support maps.

    ``support_features[r]`` is ``[K, C, h, w]`` (or a single ``[C, h, w]``).
    """
    if len(support_features) < 2:
        raise EpisodeError("classification needs at least two classes")
    q = tokenize(query_feature)
    distances = []
    for r, feats in enumerate(support_features):
        if feats.ndim == 3:
            feats = feats.reshape((1,) + feats.shape)
        if feats.shape[0] == 0:
            raise EpisodeError(f"class {r} has no support samples")
        s = tokenize(feats)
        s = s.reshape((s.shape[0] * s.shape[1], s.shape[2]))
        distances.append(class_dissimilarity(q, s, params))
    return probabilities_from_distances(stack(distances))


def episode_distances(query_features: Tensor, support_features: Tensor, params: MetricParams) -> Tensor:
    """Batched class dissimilarities ``[Nq, N]``.

    ``query_features`` is ``[Nq, C, h, w]``; ``support_features`` is
    ``[N, K, C, h, w]``, class-major.
    """
    n_way, shot = support_features.shape[:2]
    if n_way < 2:
        raise EpisodeError("an episode needs at least two classes")
    if shot < 1:
        raise EpisodeError("every class needs at least one support sample")
    qt = tokenize(query_features)                                     # Nq, m, C
    flat = support_features.reshape((n_way * shot,) + support_features.shape[2:])
    st = tokenize(flat)                                               # N*K, m, C
    m, c = st.shape[1:]
    st = st.reshape((n_way, shot * m, c))                             # N, K*m, C
    _check_tokens(qt, st, params)
    nq = qt.shape[0]
    d = params.proj_dim

    q_q, q_k, q_v = [(qt @ w).reshape((nq, 1, m, d)) for w in (params.wq, params.wk, params.wv)]
    s_q, s_k, s_v = [(st @ w).reshape((1, n_way, shot * m, d)) for w in (params.wq, params.wk, params.wv)]
    q_hat, _ = _attend(q_q, s_k, s_v)   # Nq, N, m, d
    s_hat, _ = _attend(s_q, q_k, q_v)   # Nq, N, Km, d
    lam1, lam2 = params.lambdas()
    d_q = ((q_v - q_hat) ** 2).sum(axis=(2, 3))
    d_s = ((s_v - s_hat) ** 2).sum(axis=(2, 3))
    return lam1 * d_q + lam2 * d_s


def episode_log_probs(query_features: Tensor, support_features: Tensor, params: MetricParams) -> Tensor:
    return F.log_softmax(-episode_distances(query_features, support_features, params), axis=-1)


def episode_loss(query_features: Tensor, support_features: Tensor, labels: np.ndarray,
                 params: MetricParams) -> Tensor:
    """Cross-entropy of the distance-softmax against integer query labels."""
    logits = -episode_distances(query_features, support_features, params)
    return F.cross_entropy(logits, labels)
