"""Adaptive receptive field (ARF) convolution.

Per sample, two scale heads read axis-pooled descriptors of the input and
predict continuous kernel scales ``lambda_u`` (vertical) and ``lambda_v``
(horizontal) in ``[1, rho_max]``.  The scales pick a discrete anisotropic
kernel ``(N_u, N_v)`` from a bank and shift the sampling grid through a
continuous offset, which is the only path by which the loss reaches the
scale heads.  The resampled map is convolved with the selected kernel,
modulated, biased and finally reweighted by channel attention.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Optional, Tuple

import numpy as np

from . import functional as F
from .errors import ConfigurationError, ContractViolation, DimensionError
from .layers import BatchNorm, Conv1d, Conv2d, ParamStore, kaiming_uniform
from .tensor import Tensor, clip, scatter_rows, stack


@dataclass(frozen=True)
class ArfConfig:
    channels_in: int
    channels_out: int
    rho_max: int = 9
    sigma_step: int = 2
    kappa: float = 0.1
    eca_window: int = 3
    leaky_slope: float = F.LEAKY_SLOPE
    frozen_bank: bool = False

    def __post_init__(self):
        if self.rho_max < 3 or self.rho_max % 2 == 0:
            raise ConfigurationError(f"rho_max must be an odd integer >= 3, got {self.rho_max}")
        if not 1 <= self.sigma_step <= self.rho_max:
            raise ConfigurationError(f"sigma_step must lie in [1, rho_max], got {self.sigma_step}")
        if self.kappa < 0:
            raise ConfigurationError(f"kappa must be >= 0, got {self.kappa}")
        if self.channels_in < 1 or self.channels_out < 1:
            raise ConfigurationError("channel counts must be positive")
        if self.eca_window < 1 or self.eca_window % 2 == 0:
            raise ConfigurationError("eca_window must be a positive odd integer")

    @property
    def tau(self) -> float:
        return (self.rho_max + 1) / 2.0

    def kernel_sizes(self) -> list:
        """Odd extents reachable by ``2 * floor(lambda / sigma) + 1``."""
        lo = 1 // self.sigma_step
        hi = self.rho_max // self.sigma_step
        return [2 * k + 1 for k in range(lo, hi + 1)]

    def bank_keys(self) -> list:
        sizes = self.kernel_sizes()
        return [(nu, nv) for nu in sizes for nv in sizes]


def discretize_scale(lam, sigma_step: int, rho_max: Optional[int] = None):
    """``N = 2 * floor(lambda / sigma) + 1``; works on scalars and arrays."""
    lam_arr = np.asarray(lam, dtype=np.float64)
    if np.any(lam_arr < 1.0 - 1e-9) or (rho_max is not None and np.any(lam_arr > rho_max + 1e-9)):
        raise ContractViolation(f"scale outside [1, rho_max]: {lam}")
    n = 2 * np.floor(lam_arr / sigma_step).astype(np.int64) + 1
    return int(n) if n.ndim == 0 else n


def scale_from_raw(raw: Tensor, rho_max: int) -> Tensor:
    """Map an unconstrained head output to ``sigmoid(raw) * (rho_max - 1) + 1``."""
    return F.sigmoid(raw) * float(rho_max - 1) + 1.0


@lru_cache(maxsize=256)
def base_lattice(n: int, length: int) -> np.ndarray:
    """Uniform ``n``-point lattice over [-1, 1] upsampled to ``length`` points.

    A single-point lattice sits at the centre (0).
    """
    points = np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1)
    out = F.resize_matrix(length, n) @ points
    out.setflags(write=False)
    return out


class ScaleHead:
    """conv1d -> batch norm -> LeakyReLU -> conv1d -> mean, one raw value per sample.

    The output conv starts at zero, so every sample begins at the midpoint
    scale and shares one bank kernel until the heads learn to separate them.
    """

    def __init__(self, store: ParamStore, name: str, channels: int, rng, slope: float):
        self.conv1 = Conv1d(store, f"{name}.conv1", channels, channels, 3, rng)
        self.norm = BatchNorm(store, f"{name}.bn", channels)
        self.conv2 = Conv1d(store, f"{name}.conv2", channels, 1, 3, rng)
        self.conv2.weight.data[...] = 0.0
        self.slope = slope

    def __call__(self, descriptor: Tensor, training: bool) -> Tensor:
        h = F.leaky_relu(self.norm(self.conv1(descriptor), training), self.slope)
        return self.conv2(h).mean(axis=(1, 2))


class TwoConvHead:
    """conv3x3 -> sigmoid -> conv3x3, optionally followed by tanh."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, rng, final_tanh: bool):
        self.conv1 = Conv2d(store, f"{name}.conv1", c_in, c_out, (3, 3), rng)
        self.conv2 = Conv2d(store, f"{name}.conv2", c_out, c_out, (3, 3), rng)
        self.final_tanh = final_tanh

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv2(F.sigmoid(self.conv1(x)))
        return F.tanh(h) if self.final_tanh else h


class ArfLayer:
    """Learnable state of one ARF layer.

    The kernel bank holds one independently initialised filter per
    reachable ``(N_u, N_v)``, stored in convolution layout
    ``[C_out, C_in, N_u, N_v]`` under ``<prefix>.bank.k{N_u}x{N_v}``.
    """

    def __init__(self, store: ParamStore, prefix: str, config: ArfConfig,
                 rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        c_in, c_out = config.channels_in, config.channels_out
        self.config = config
        self.prefix = prefix
        self.scale_u = ScaleHead(store, f"{prefix}.scale_u", c_in, rng, config.leaky_slope)
        self.scale_v = ScaleHead(store, f"{prefix}.scale_v", c_in, rng, config.leaky_slope)
        self.bank: Dict[Tuple[int, int], Tensor] = {}
        for nu, nv in config.bank_keys():
            w = store.add_param(f"{prefix}.bank.k{nu}x{nv}",
                                kaiming_uniform(rng, (c_out, c_in, nu, nv), c_in * nu * nv))
            w.requires_grad = not config.frozen_bank
            self.bank[(nu, nv)] = w
        self.modulation = TwoConvHead(store, f"{prefix}.modulation", c_in, c_out, rng, final_tanh=True)
        self.bias_head = TwoConvHead(store, f"{prefix}.bias", c_in, c_out, rng, final_tanh=False)
        self.attention = Conv1d(store, f"{prefix}.attention", 1, 1, config.eca_window, rng)
        self.force_kernel: Optional[Tuple[int, int]] = None

    def kernel(self, nu: int, nv: int) -> Tensor:
        try:
            return self.bank[(nu, nv)]
        except KeyError:
            raise AssertionError(f"kernel bank has no entry for {(nu, nv)}; bank construction is inconsistent")

    def __call__(self, x: Tensor, training: bool, probe: Optional[dict] = None) -> Tensor:
        return arf_apply(x, self, training, probe=probe)


def predict_scales(x: Tensor, layer: ArfLayer, training: bool = False) -> tuple:
    """Continuous vertical and horizontal scales, each of shape ``[B]``."""
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    rho = layer.config.rho_max
    zeta_vertical = F.gap_axis(x, "vertical")      # [B, C, W]
    zeta_horizontal = F.gap_axis(x, "horizontal")  # [B, C, H]
    lam_u = scale_from_raw(layer.scale_u(zeta_vertical, training), rho)
    lam_v = scale_from_raw(layer.scale_v(zeta_horizontal, training), rho)
    return lam_u, lam_v


def build_deformed_grid(n_u, n_v, lam_u: Tensor, lam_v: Tensor, height: int, width: int,
                        config: ArfConfig) -> Tensor:
    """Sampling grid ``clip(base + kappa * [V, U], -1, 1)``.

    ``n_u``/``n_v`` and ``lam_u``/``lam_v`` are per-sample (length ``B``) or
    scalars; the result is ``[B, 2, H, W]`` (``[2, H, W]`` for scalars).
    Channel 0 is the horizontal coordinate, channel 1 the vertical one.
    """
    scalar = np.ndim(n_u) == 0
    n_u = np.atleast_1d(np.asarray(n_u, dtype=np.int64))
    n_v = np.atleast_1d(np.asarray(n_v, dtype=np.int64))
    if not isinstance(lam_u, Tensor):
        lam_u = Tensor(np.atleast_1d(np.asarray(lam_u, dtype=np.float64)))
    if not isinstance(lam_v, Tensor):
        lam_v = Tensor(np.atleast_1d(np.asarray(lam_v, dtype=np.float64)))
    lam_u = lam_u.reshape((-1,))
    lam_v = lam_v.reshape((-1,))
    if np.any(n_u % 2 == 0) or np.any(n_v % 2 == 0):
        raise ContractViolation("discrete kernel extents must be odd")
    batch = len(n_u)
    dtype = lam_u.dtype
    base = np.empty((batch, 2, height, width), dtype=dtype)
    for b in range(batch):
        base[b, 0] = base_lattice(int(n_v[b]), width)[None, :]
        base[b, 1] = base_lattice(int(n_u[b]), height)[:, None]

    tau = config.tau
    offset_u = (lam_u - tau) * (1.0 / tau)
    offset_v = (lam_v - tau) * (1.0 / tau)
    offset = stack([offset_v, offset_u], axis=1) * float(config.kappa)
    grid = clip(Tensor(base) + offset.reshape((batch, 2, 1, 1)), -1.0, 1.0)
    return grid.reshape((2, height, width)) if scalar else grid


def channel_attention(y: Tensor, layer: ArfLayer) -> Tensor:
    b, c = y.shape[:2]
    pooled = F.global_avg_pool(y).reshape((b, 1, c))
    gate = F.sigmoid(layer.attention(pooled)).reshape((b, c, 1, 1))
    return gate * y


def arf_apply(x: Tensor, layer: ArfLayer, training: bool = False, probe: Optional[dict] = None) -> Tensor:
    """Full ARF forward for ``[B, C_in, H, W]`` (or unbatched) input."""
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape((1,) + x.shape)
    config = layer.config
    if x.shape[1] != config.channels_in:
        raise DimensionError(f"ARF layer expects {config.channels_in} channels, got {x.shape[1]}")
    batch, _, height, width = x.shape

    lam_u, lam_v = predict_scales(x, layer, training)
    if layer.force_kernel is not None:
        n_u = np.full(batch, layer.force_kernel[0], dtype=np.int64)
        n_v = np.full(batch, layer.force_kernel[1], dtype=np.int64)
    else:
        n_u = discretize_scale(lam_u.data, config.sigma_step, config.rho_max)
        n_v = discretize_scale(lam_v.data, config.sigma_step, config.rho_max)
    if probe is not None:
        probe[layer.prefix] = (np.array(n_u), np.array(n_v), lam_u.data.copy(), lam_v.data.copy())

    grid = build_deformed_grid(n_u, n_v, lam_u, lam_v, height, width, config)
    resampled = F.bilinear_grid_sample(x, grid)

    keys = list(zip(n_u.tolist(), n_v.tolist()))
    groups: Dict[Tuple[int, int], list] = {}
    for i, key in enumerate(keys):
        groups.setdefault(key, []).append(i)
    if len(groups) == 1:
        (key,) = groups
        filtered = F.conv2d(resampled, layer.kernel(*key))
    else:
        rows = [np.array(idx) for idx in groups.values()]
        parts = [F.conv2d(resampled[r], layer.kernel(*key)) for key, r in zip(groups, rows)]
        filtered = scatter_rows(parts, rows, batch)

    modulated = filtered * layer.modulation(x) + layer.bias_head(x)
    out = channel_attention(modulated, layer)
    return out.reshape(out.shape[1:]) if squeeze else out
