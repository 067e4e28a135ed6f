"""Differentiable primitives used by the network.

Spatial ops accept batched ``[B, C, H, W]`` input; the unbatched
``[C, H, W]`` form is accepted too and returned unbatched.
"""

from __future__ import annotations

import logging
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ConfigurationError, ContractViolation, DimensionError
from .tensor import Tensor, as_tensor, make_result

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.1
BN_MOMENTUM = 0.9
BN_EPS = 1e-5


def _batched(x: Tensor) -> tuple:
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected [C,H,W] or [B,C,H,W], got shape {x.shape}")
    return x, False


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return y.reshape(y.shape[1:]) if squeeze else y


# -- convolution ---------------------------------------------------------
def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Same-padded (zero) stride-1 cross-correlation.

    ``out[b,o,y,x] = sum_{c,i,j} w[o,c,i,j] * xpad[b,c,y+i-kh//2,x+j-kw//2] + bias[o]``
    """
    x, squeeze = _batched(x)
    out_c, in_c, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"kernel extents must be odd, got {kh}x{kw}")
    if x.shape[1] != in_c:
        raise DimensionError(f"kernel expects {in_c} input channels, input has {x.shape[1]}")
    y = make_result(*_conv2d_core(x, weight))
    if bias is not None:
        y = y + bias.reshape((1, out_c, 1, 1))
    return _unbatch(y, squeeze)


def _im2col(xh: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Channels-last ``[B, H, W, C]`` -> same-padded patches ``[B*H*W, kh*kw*C]``."""
    b, h, w, c = xh.shape
    if kh == 1 and kw == 1:
        return xh.reshape(b * h * w, c)
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((b, h + 2 * ph, w + 2 * pw, c), dtype=xh.dtype)
    xp[:, ph:ph + h, pw:pw + w, :] = xh
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # b,h,w,c,kh,kw
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, kh * kw * c)


def _conv2d_core(x: Tensor, weight: Tensor) -> tuple:
    xd, wd = x.data, weight.data
    b, c, h, w = xd.shape
    out_c, _, kh, kw = wd.shape
    wmat = wd.transpose(0, 2, 3, 1).reshape(out_c, kh * kw * c)
    cols = _im2col(np.ascontiguousarray(xd.transpose(0, 2, 3, 1)), kh, kw)
    out = np.ascontiguousarray((cols @ wmat.T).reshape(b, h, w, out_c).transpose(0, 3, 1, 2))

    def backward(g):
        gh = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        gw = gx = None
        if weight.requires_grad:
            gw = (gh.reshape(b * h * w, out_c).T @ cols).reshape(out_c, kh, kw, c).transpose(0, 3, 1, 2)
        if x.requires_grad:
            # input gradient = same-padded correlation with the flipped kernel
            flipped = wd[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(kh * kw * out_c, c)
            gcols = _im2col(gh, kh, kw) @ flipped
            gx = np.ascontiguousarray(gcols.reshape(b, h, w, c).transpose(0, 3, 1, 2))
        return gx, gw

    return out, (x, weight), backward


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Same-padded 1-D convolution of ``[B, C, L]`` with a ``[O, C, k]`` kernel."""
    b, c, length = x.shape
    out = conv2d(x.reshape((b, c, 1, length)), weight.reshape(weight.shape[:2] + (1, weight.shape[2])), bias)
    return out.reshape((b, out.shape[1], length))


# -- pooling -------------------------------------------------------------
def max_pool2d(x: Tensor) -> Tensor:
    """2x2 stride-2 max pooling; odd extents are padded (ceil mode)."""
    x, squeeze = _batched(x)
    xd = x.data
    b, c, h, w = xd.shape
    ho, wo = (h + 1) // 2, (w + 1) // 2
    if h % 2 or w % 2:
        padded = np.full((b, c, 2 * ho, 2 * wo), -np.inf, dtype=xd.dtype)
        padded[:, :, :h, :w] = xd
    else:
        padded = xd
    blocks = padded.reshape(b, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((b, c, ho, wo, 4), dtype=xd.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gp = gb.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * ho, 2 * wo)
        return (gp[:, :, :h, :w],)

    return _unbatch(make_result(out, (x,), backward), squeeze)


def gap_axis(x: Tensor, axis: str) -> Tensor:
    """Average over one spatial axis.

    ``vertical`` averages over rows and returns ``[..., C, W]``;
    ``horizontal`` averages over columns and returns ``[..., C, H]``.
    """
    if x.ndim < 3:
        raise DimensionError(f"gap_axis needs a [.., C, H, W] tensor, got {x.shape}")
    if axis == "vertical":
        return x.mean(axis=x.ndim - 2)
    if axis == "horizontal":
        return x.mean(axis=x.ndim - 1)
    raise ConfigurationError(f"axis must be 'vertical' or 'horizontal', got {axis!r}")


def global_avg_pool(x: Tensor) -> Tensor:
    return x.mean(axis=(x.ndim - 2, x.ndim - 1))


# -- activations ---------------------------------------------------------
def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    return expit(z)


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1.0 - out * out),))


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    xd = x.data
    scale = np.where(xd > 0, 1.0, slope).astype(xd.dtype)
    return make_result(xd * scale, (x,), lambda g: (g * scale,))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.logaddexp(0.0, xd).astype(xd.dtype, copy=False)
    sig = _stable_sigmoid(xd)
    return make_result(out, (x,), lambda g: (g * sig,))


_ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "leaky_relu": leaky_relu, "softplus": softplus}


def activation(x: Tensor, kind: str, slope: float = LEAKY_SLOPE) -> Tensor:
    if kind not in _ACTIVATIONS:
        raise ConfigurationError(f"unknown activation {kind!r}; choose from {sorted(_ACTIVATIONS)}")
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    return _ACTIVATIONS[kind](x)


# -- normalization -------------------------------------------------------
class BatchNormState:
    """Per-channel affine parameters and running statistics."""

    def __init__(self, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                 momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        self.gamma = gamma
        self.beta = beta
        self.running_mean = running_mean
        self.running_var = running_var
        self.momentum = momentum
        self.eps = eps


def batch_norm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Normalize ``[B, C, ...]`` per channel over every axis except 1.

    Training mode uses biased batch statistics and folds the unbiased
    variance into the running estimate with ``momentum`` as the keep rate.
    """
    if x.ndim < 2:
        raise DimensionError(f"batch_norm needs [B, C, ...], got {x.shape}")
    xd = x.data
    c = xd.shape[1]
    axes = (0,) + tuple(range(2, xd.ndim))
    bshape = (1, c) + (1,) * (xd.ndim - 2)
    count = xd.size // c

    if training:
        if xd.shape[0] == 1:
            logger.warning("batch_norm in train mode with batch size 1")
        mu = xd.mean(axis=axes, keepdims=True)
        centered = xd - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = centered * inv_std
        m = state.momentum
        unbiased = var.reshape(c) * (count / max(count - 1, 1))
        state.running_mean[...] = m * state.running_mean + (1 - m) * mu.reshape(c)
        state.running_var[...] = m * state.running_var + (1 - m) * unbiased

        def backward(g):
            gx = inv_std * (g - g.mean(axis=axes, keepdims=True)
                            - xhat * (g * xhat).mean(axis=axes, keepdims=True))
            return (gx,)
    else:
        inv_std = 1.0 / np.sqrt(state.running_var.reshape(bshape) + state.eps)
        xhat = (xd - state.running_mean.reshape(bshape)) * inv_std

        def backward(g):
            return (g * inv_std,)

    normalized = make_result(xhat.astype(xd.dtype, copy=False), (x,), backward)
    return normalized * state.gamma.reshape(bshape) + state.beta.reshape(bshape)


# -- softmax family ------------------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    z = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax(logits, axis=-1)
    picked = logp[np.arange(len(labels)), labels]
    return -picked.mean()


# -- resampling ----------------------------------------------------------
def _sample_positions(coord: np.ndarray, extent: int) -> tuple:
    """Floor index, fractional weight and d(pixel)/d(coord) for one axis."""
    if extent == 1:
        zero = np.zeros(coord.shape, dtype=np.int64)
        return zero, np.zeros_like(coord), 0.0
    pos = (coord + 1.0) * (0.5 * (extent - 1))
    lo = np.clip(np.floor(pos), 0, extent - 2).astype(np.int64)
    return lo, pos - lo, 0.5 * (extent - 1)


def bilinear_grid_sample(x: Tensor, grid: Tensor) -> Tensor:
    """Bilinear resampling with align-corners coordinates.

    ``grid[:, 0]`` holds horizontal and ``grid[:, 1]`` vertical positions in
    ``[-1, 1]``; -1 is the centre of the first pixel and +1 the centre of the
    last.  Differentiable with respect to both ``x`` and ``grid``.
    """
    x, squeeze = _batched(x)
    grid = as_tensor(grid)
    if grid.ndim == 3:
        grid = grid.reshape((1,) + grid.shape)
    xd, gd = x.data, grid.data
    b, c, h, w = xd.shape
    if gd.ndim != 4 or gd.shape[0] != b or gd.shape[1] != 2:
        raise DimensionError(f"grid must be [B,2,Ho,Wo] matching batch {b}, got {gd.shape}")
    if not np.all(np.abs(gd) <= 1.0 + 1e-12):
        raise ContractViolation("grid values must lie in [-1, 1]; clip before sampling")
    ho, wo = gd.shape[2:]
    npix = ho * wo

    x0, wx, dx = _sample_positions(gd[:, 0].reshape(b, npix), w)
    y0, wy, dy = _sample_positions(gd[:, 1].reshape(b, npix), h)
    x1 = x0 + (1 if w > 1 else 0)
    y1 = y0 + (1 if h > 1 else 0)
    corners = (y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1)
    weights = ((1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy)

    flat = xd.reshape(b, c, h * w)
    values = [np.take_along_axis(flat, idx[:, None, :], axis=2) for idx in corners]
    out = sum(v * wt[:, None, :].astype(xd.dtype) for v, wt in zip(values, weights))
    out = out.reshape(b, c, ho, wo)

    def backward(g):
        g3 = g.reshape(b, c, npix)
        gx = None
        if x.requires_grad:
            base = (np.arange(b * c, dtype=np.int64) * (h * w)).reshape(b, c, 1)
            idx = np.concatenate([(base + k[:, None, :]).ravel() for k in corners])
            wts = np.concatenate([(g3 * wt[:, None, :]).ravel() for wt in weights])
            gx = np.bincount(idx, weights=wts, minlength=b * c * h * w)
            gx = gx.astype(xd.dtype, copy=False).reshape(b, c, h, w)
        ggrid = None
        if grid.requires_grad:
            v00, v01, v10, v11 = values
            dfx = (v01 - v00) * (1 - wy)[:, None, :] + (v11 - v10) * wy[:, None, :]
            dfy = (v10 - v00) * (1 - wx)[:, None, :] + (v11 - v01) * wx[:, None, :]
            ggrid = np.stack([(g3 * dfx).sum(axis=1) * dx, (g3 * dfy).sum(axis=1) * dy], axis=1)
            ggrid = ggrid.reshape(b, 2, ho, wo).astype(gd.dtype, copy=False)
        return gx, ggrid

    return _unbatch(make_result(out, (x, grid), backward), squeeze)


def resize_matrix(n_out: int, n_in: int, dtype=np.float64) -> np.ndarray:
    """``[n_out, n_in]`` align-corners linear interpolation operator."""
    mat = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        mat[:, 0] = 1.0
        return mat
    if n_out == 1:
        src = np.array([0.5 * (n_in - 1)])
    else:
        src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.clip(np.floor(src).astype(np.int64), 0, n_in - 2)
    frac = src - lo
    rows = np.arange(n_out)
    mat[rows, lo] += 1.0 - frac
    mat[rows, lo + 1] += frac
    return mat


def bilinear_resize(x: Tensor, height: int, width: int) -> Tensor:
    """Align-corners bilinear resize of the last two axes."""
    ry = resize_matrix(height, x.shape[-2], x.dtype)
    rx = resize_matrix(width, x.shape[-1], x.dtype)
    return Tensor(ry) @ x @ Tensor(np.ascontiguousarray(rx.T))
