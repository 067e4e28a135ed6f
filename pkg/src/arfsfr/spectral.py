"""Channel-wise orthonormal DCT-II, learnable spectral mask and inverse."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import functional as F
from .errors import DimensionError
from .layers import ParamStore
from .tensor import Tensor

TEMPLATE_SIZE = 16


@lru_cache(maxsize=64)
def _basis(n: int) -> np.ndarray:
    k = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    mat = np.cos(np.pi * (2 * x + 1) * k / (2 * n))
    alpha = np.full((n, 1), np.sqrt(2.0 / n))
    alpha[0, 0] = np.sqrt(1.0 / n)
    mat = alpha * mat
    mat.setflags(write=False)
    return mat


def dct_matrix(n: int, dtype=np.float64) -> np.ndarray:
    """``[n, n]`` orthonormal DCT-II matrix; row ``u`` is ``alpha(u) cos(pi (2x+1) u / 2n)``."""
    return _basis(n).astype(dtype)


def dct2(x: Tensor) -> Tensor:
    """Separable 2-D DCT over the last two axes (row pass, then column pass)."""
    if x.ndim < 2:
        raise DimensionError("dct2 needs at least two axes")
    h, w = x.shape[-2:]
    rows = x @ Tensor(dct_matrix(w, x.dtype).T.copy())
    return Tensor(dct_matrix(h, x.dtype)) @ rows


def idct2(coeffs: Tensor) -> Tensor:
    """Inverse of :func:`dct2` (transpose of the orthonormal basis)."""
    if coeffs.ndim < 2:
        raise DimensionError("idct2 needs at least two axes")
    h, w = coeffs.shape[-2:]
    rows = coeffs @ Tensor(dct_matrix(w, coeffs.dtype))
    return Tensor(dct_matrix(h, coeffs.dtype).T.copy()) @ rows


def dct2_naive(x: np.ndarray) -> np.ndarray:
    """Direct double-sum evaluation, ``O(H^2 W^2)`` per channel."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    out = np.zeros_like(x)
    for u in range(h):
        au = np.sqrt((1.0 if u == 0 else 2.0) / h)
        for v in range(w):
            av = np.sqrt((1.0 if v == 0 else 2.0) / w)
            acc = np.zeros(x.shape[:-2])
            for i in range(h):
                cu = np.cos(np.pi * (2 * i + 1) * u / (2 * h))
                for j in range(w):
                    acc = acc + x[..., i, j] * cu * np.cos(np.pi * (2 * j + 1) * v / (2 * w))
            out[..., u, v] = au * av * acc
    return out


class SpectralMask:
    """Learnable ``[1, C, 16, 16]`` template; effective mask ``1 - sigmoid(resize(template))``."""

    def __init__(self, store: ParamStore, channels: int, name: str = "spectral.mask_template"):
        self.channels = channels
        self.template = store.add_param(name, np.zeros((1, channels, TEMPLATE_SIZE, TEMPLATE_SIZE)))

    def mask(self, height: int, width: int) -> Tensor:
        return 1.0 - F.sigmoid(F.bilinear_resize(self.template, height, width))

    def __call__(self, coeffs: Tensor) -> Tensor:
        return apply_spectral_mask(coeffs, self)


def apply_spectral_mask(coeffs: Tensor, template: SpectralMask) -> Tensor:
    c = coeffs.shape[-3]
    if c != template.channels:
        raise DimensionError(f"mask template has {template.channels} channels, coefficients have {c}")
    m = template.mask(*coeffs.shape[-2:])
    if coeffs.ndim == 3:
        m = m.reshape(m.shape[1:])
    return coeffs * m


def frequency_input(image: Tensor, template: SpectralMask) -> Tensor:
    """``idct2(mask(dct2(image)))``: the frequency branch's spatial-domain input."""
    return idct2(apply_spectral_mask(dct2(image), template))
