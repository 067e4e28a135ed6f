"""Named parameter storage and the small layers built on it."""

from __future__ import annotations

from typing import Dict, Optional

import numpy as np

from . import functional as F
from .tensor import Tensor


class ParamStore:
    """Flat, insertion-ordered registry of learnable tensors and buffers.

    Names are dotted paths (``arf.spatial.b1.bank.k3x3``) and are what
    checkpoints are keyed by, so registration order must be deterministic.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: Dict[str, Tensor] = {}
        self.buffers: Dict[str, np.ndarray] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.buffers:
            raise KeyError(f"duplicate buffer name {name}")
        arr = np.array(value, dtype=self.dtype)
        self.buffers[name] = arr
        return arr

    def state(self) -> Dict[str, np.ndarray]:
        out = {name: t.data for name, t in self.params.items()}
        out.update(self.buffers)
        return out

    def load_state(self, tensors: Dict[str, np.ndarray]) -> None:
        missing = [n for n in list(self.params) + list(self.buffers) if n not in tensors]
        if missing:
            raise KeyError(f"checkpoint lacks tensors: {missing[:5]}")
        for name, t in self.params.items():
            src = tensors[name]
            if src.shape != t.shape:
                raise ValueError(f"{name}: shape {src.shape} != {t.shape}")
            t.data = np.array(src, dtype=self.dtype)
        for name, buf in self.buffers.items():
            buf[...] = tensors[name]

    def astype(self, dtype) -> None:
        """Cast every parameter and buffer in place."""
        self.dtype = np.dtype(dtype)
        for t in self.params.values():
            t.data = t.data.astype(self.dtype)
        for name in self.buffers:
            self.buffers[name] = self.buffers[name].astype(self.dtype)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / max(fan_in, 1)) / np.sqrt(1.0 + F.LEAKY_SLOPE ** 2)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d:
    """Same-padded convolution with an optional bias."""

    def __init__(self, store: ParamStore, name: str, in_ch: int, out_ch: int, kernel=(3, 3),
                 rng: Optional[np.random.Generator] = None, bias: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        kh, kw = kernel
        fan_in = in_ch * kh * kw
        self.weight = store.add_param(f"{name}.weight", kaiming_uniform(rng, (out_ch, in_ch, kh, kw), fan_in))
        self.bias = store.add_param(f"{name}.bias", np.zeros(out_ch)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias)


class Conv1d:
    """Same-padded convolution along the last axis of ``[B, C, L]``."""

    def __init__(self, store: ParamStore, name: str, in_ch: int, out_ch: int, window: int = 3,
                 rng: Optional[np.random.Generator] = None, bias: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = store.add_param(f"{name}.weight", kaiming_uniform(rng, (out_ch, in_ch, window), in_ch * window))
        self.bias = store.add_param(f"{name}.bias", np.zeros(out_ch)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv1d(x, self.weight, self.bias)


class BatchNorm:
    def __init__(self, store: ParamStore, name: str, channels: int):
        self.state = F.BatchNormState(
            store.add_param(f"{name}.gamma", np.ones(channels)),
            store.add_param(f"{name}.beta", np.zeros(channels)),
            store.add_buffer(f"{name}.running_mean", np.zeros(channels)),
            store.add_buffer(f"{name}.running_var", np.ones(channels)),
        )
        self._store = store
        self._names = (f"{name}.running_mean", f"{name}.running_var")

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        # buffers may have been replaced by ParamStore.astype
        self.state.running_mean = self._store.buffers[self._names[0]]
        self.state.running_var = self._store.buffers[self._names[1]]
        return F.batch_norm(x, self.state, training)
