"""Dual-branch spatial/frequency embedding network.

The spatial branch reads the image directly; the frequency branch reads
``idct2(mask(dct2(image)))``.  Both branches are small conv backbones in
which selected conv layers are replaced by ARF layers, and their outputs
are fused pixel-wise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Tuple

import numpy as np

from . import functional as F
from .arf import ArfConfig, ArfLayer
from .errors import ConfigurationError, DimensionError
from .fusion import FusionHead, fuse
from .layers import BatchNorm, Conv2d, ParamStore
from .spectral import SpectralMask, frequency_input
from .tensor import Tensor, add

BACKBONES = ("conv4_mini", "resnet_mini")
BRANCH_MODES = ("both", "spatial_only", "frequency_only")
BRANCHES = ("spatial", "frequency")
LAYERS_PER_BLOCK = {"conv4_mini": 1, "resnet_mini": 3}
DEFAULT_ARF_LAYER = {"conv4_mini": 1, "resnet_mini": 2}

Position = Tuple[str, int, int]


def active_branches(branch_mode: str) -> tuple:
    return {"both": BRANCHES, "spatial_only": ("spatial",), "frequency_only": ("frequency",)}[branch_mode]


def parse_placement(text: str, backbone: str, n_blocks: int, branch_mode: str) -> FrozenSet[Position]:
    """Parse ``all`` / ``none`` / ``spatial:1,frequency:3[:layer],...``.

    ``all`` places ARF at the default layer of every block of every active
    branch (every layer for conv4_mini, the second conv for resnet_mini).
    """
    text = text.strip()
    if text in ("", "none"):
        return frozenset()
    layer = DEFAULT_ARF_LAYER[backbone]
    if text == "all":
        return frozenset((b, i, layer) for b in active_branches(branch_mode) for i in range(1, n_blocks + 1))
    out = set()
    for item in text.split(","):
        parts = item.strip().split(":")
        if len(parts) not in (2, 3):
            raise ConfigurationError(f"bad placement entry {item!r}; expected branch:block[:layer]")
        try:
            pos = (parts[0], int(parts[1]), int(parts[2]) if len(parts) == 3 else layer)
        except ValueError:
            raise ConfigurationError(f"bad placement entry {item!r}; block and layer must be integers")
        out.add(pos)
    return frozenset(out)


def format_placement(positions) -> str:
    return ",".join(f"{b}:{i}:{l}" for b, i, l in sorted(positions)) or "none"


@dataclass(frozen=True)
class EncoderConfig:
    backbone: str = "conv4_mini"
    widths: Tuple[int, ...] = (16, 32, 64, 64)
    arf_placement: FrozenSet[Position] = field(default=None)
    branch_mode: str = "both"
    rho_max: int = 9
    sigma_step: int = 2
    kappa: float = 0.1
    image_size: int = 32
    in_channels: int = 3
    leaky_slope: float = F.LEAKY_SLOPE
    frozen_bank: bool = False
    tie_branches: bool = False
    fusion_hidden: Optional[int] = None

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigurationError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.branch_mode not in BRANCH_MODES:
            raise ConfigurationError(f"branch_mode must be one of {BRANCH_MODES}, got {self.branch_mode!r}")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigurationError("widths must be a non-empty list of positive integers")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.arf_placement is None:
            placement = parse_placement("all", self.backbone, len(self.widths), self.branch_mode)
        elif isinstance(self.arf_placement, str):
            placement = parse_placement(self.arf_placement, self.backbone, len(self.widths), self.branch_mode)
        else:
            placement = frozenset(tuple(p) for p in self.arf_placement)
        object.__setattr__(self, "arf_placement", placement)
        valid = self.valid_positions()
        bad = sorted(p for p in placement if p not in valid)
        if bad:
            raise ConfigurationError(
                f"invalid ARF placement {format_placement(bad)}; valid positions: {format_placement(valid)}")
        if self.image_size < 1 or self.in_channels < 1:
            raise ConfigurationError("image_size and in_channels must be positive")
        if self.tie_branches and self.branch_mode != "both":
            raise ConfigurationError("tie_branches requires branch_mode = both")
        ArfConfig(1, 1, self.rho_max, self.sigma_step, self.kappa)

    def valid_positions(self) -> FrozenSet[Position]:
        layers = LAYERS_PER_BLOCK[self.backbone]
        return frozenset((b, i, l) for b in active_branches(self.branch_mode)
                         for i in range(1, len(self.widths) + 1) for l in range(1, layers + 1))

    def output_shape(self) -> tuple:
        """``(C, h, w)`` of the embedding; each block halves (ceil) the extent."""
        size = self.image_size
        for _ in self.widths:
            size = (size + 1) // 2
        return self.widths[-1], size, size

    def arf_config(self, c_in: int, c_out: int) -> ArfConfig:
        return ArfConfig(c_in, c_out, self.rho_max, self.sigma_step, self.kappa,
                         leaky_slope=self.leaky_slope, frozen_bank=self.frozen_bank)


class _ConvUnit:
    """One conv position: either a plain 3x3 conv or an ARF layer."""

    def __init__(self, store, config: EncoderConfig, branch: str, block: int, layer: int,
                 c_in: int, c_out: int, rng):
        tag = f"{branch}.b{block}" if LAYERS_PER_BLOCK[config.backbone] == 1 else f"{branch}.b{block}.l{layer}"
        self.tag = tag
        self.is_arf = (branch, block, layer) in config.arf_placement
        if self.is_arf:
            self.op = ArfLayer(store, f"arf.{tag}", config.arf_config(c_in, c_out), rng)
        else:
            self.op = Conv2d(store, f"conv.{tag}", c_in, c_out, (3, 3), rng)
        self.norm = BatchNorm(store, f"bn.{tag}", c_out)

    def __call__(self, x: Tensor, training: bool, probe: Optional[dict]) -> Tensor:
        y = self.op(x, training, probe) if self.is_arf else self.op(x)
        return self.norm(y, training)


class _Conv4Block:
    def __init__(self, store, config, branch, block, c_in, c_out, rng):
        self.unit = _ConvUnit(store, config, branch, block, 1, c_in, c_out, rng)
        self.slope = config.leaky_slope

    def __call__(self, x, training, probe):
        return F.max_pool2d(F.leaky_relu(self.unit(x, training, probe), self.slope))


class _ResBlock:
    def __init__(self, store, config, branch, block, c_in, c_out, rng):
        self.units = [_ConvUnit(store, config, branch, block, l, c_in if l == 1 else c_out, c_out, rng)
                      for l in (1, 2, 3)]
        self.shortcut = Conv2d(store, f"conv.{branch}.b{block}.shortcut", c_in, c_out, (1, 1), rng, bias=False)
        self.shortcut_norm = BatchNorm(store, f"bn.{branch}.b{block}.shortcut", c_out)
        self.slope = config.leaky_slope

    def __call__(self, x, training, probe):
        h = F.leaky_relu(self.units[0](x, training, probe), self.slope)
        h = F.leaky_relu(self.units[1](h, training, probe), self.slope)
        h = self.units[2](h, training, probe)
        h = add(h, self.shortcut_norm(self.shortcut(x), training))
        return F.max_pool2d(F.leaky_relu(h, self.slope))


class Branch:
    def __init__(self, store, config: EncoderConfig, name: str, rng):
        block_cls = _Conv4Block if config.backbone == "conv4_mini" else _ResBlock
        self.name = name
        self.blocks = []
        c_in = config.in_channels
        for i, c_out in enumerate(config.widths, start=1):
            self.blocks.append(block_cls(store, config, name, i, c_in, c_out, rng))
            c_in = c_out

    def __call__(self, x: Tensor, training: bool, probe: Optional[dict] = None) -> Tensor:
        for block in self.blocks:
            x = block(x, training, probe)
        return x


class Encoder:
    """The embedding function: image batch ``[B, C0, H, W]`` -> features ``[B, C, h, w]``."""

    def __init__(self, config: EncoderConfig, seed: int = 0, store: Optional[ParamStore] = None,
                 dtype=np.float32):
        self.config = config
        self.store = store if store is not None else ParamStore(dtype)
        rng = np.random.default_rng(seed)
        branches = active_branches(config.branch_mode)
        self.spatial = Branch(self.store, config, "spatial", rng) if "spatial" in branches else None
        self.spectral = None
        self.frequency = None
        if "frequency" in branches:
            self.spectral = SpectralMask(self.store, config.in_channels)
            if config.tie_branches:
                self.frequency = self.spatial
            else:
                self.frequency = Branch(self.store, config, "frequency", rng)
        self.fusion = None
        if config.branch_mode == "both":
            self.fusion = FusionHead(self.store, config.widths[-1], config.fusion_hidden, rng,
                                     slope=config.leaky_slope)

    def manifest(self) -> List[str]:
        """Structural components: one entry per branch block, plus fusion/spectral."""
        names = []
        for branch in (self.spatial, self.frequency if not self.config.tie_branches else None):
            if branch is not None:
                names.extend(f"{branch.name}.b{i}" for i in range(1, len(branch.blocks) + 1))
        if self.fusion is not None:
            names.append("fusion")
        if self.spectral is not None:
            names.append("spectral")
        return names

    def arf_layers(self) -> Dict[str, ArfLayer]:
        out = {}
        for branch in (self.spatial, self.frequency):
            if branch is None:
                continue
            for block in branch.blocks:
                units = [block.unit] if hasattr(block, "unit") else block.units
                out.update({u.op.prefix: u.op for u in units if u.is_arf})
        return out

    def _check_images(self, images: Tensor) -> Tensor:
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=self.store.dtype))
        elif images.dtype != self.store.dtype:
            images = Tensor(images.data.astype(self.store.dtype))
        if images.ndim == 3:
            images = images.reshape((1,) + images.shape)
        c, s = self.config.in_channels, self.config.image_size
        if images.ndim != 4 or images.shape[1:] != (c, s, s):
            raise DimensionError(f"expected images [B,{c},{s},{s}], got {images.shape}")
        return images

    def branch_features(self, spatial_input: Optional[Tensor], frequency_input_: Optional[Tensor],
                        training: bool = False, probe: Optional[dict] = None) -> tuple:
        theta_s = self.spatial(spatial_input, training, probe) if self.spatial is not None else None
        theta_f = self.frequency(frequency_input_, training, probe) if self.frequency is not None else None
        return theta_s, theta_f

    def forward(self, images, training: bool = False, probe: Optional[dict] = None,
                return_maps: bool = False):
        images = self._check_images(images)
        omega_f = frequency_input(images, self.spectral) if self.spectral is not None else None
        theta_s, theta_f = self.branch_features(images, omega_f, training, probe)
        maps = {"omega_f": omega_f, "theta_s": theta_s, "theta_f": theta_f}
        if self.fusion is not None:
            features, w_s, w_f = fuse(theta_s, theta_f, self.fusion)
            maps.update(w_s=w_s, w_f=w_f)
        else:
            features = theta_s if theta_s is not None else theta_f
        return (features, maps) if return_maps else features

    __call__ = forward


def build_encoder(config: EncoderConfig, seed: int = 0, dtype=np.float32,
                  store: Optional[ParamStore] = None) -> Encoder:
    return Encoder(config, seed, store, dtype)


def encode(image, encoder: Encoder, training: bool = False) -> Tensor:
    """Embed one image ``[C0, H, W]`` (or a batch) with ``encoder``."""
    squeeze = np.ndim(image.data if isinstance(image, Tensor) else image) == 3
    out = encoder.forward(image, training)
    return out.reshape(out.shape[1:]) if squeeze else out
