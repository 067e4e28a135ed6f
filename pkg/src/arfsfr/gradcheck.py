"""Central-difference verification of reverse-mode gradients."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from .errors import GradCheckError
from .tensor import Tensor, no_grad


def _scalar(value: Tensor) -> float:
    if value.size != 1:
        raise GradCheckError(f"checked function must return a scalar, got shape {value.shape}")
    return float(value.data.reshape(()))


def finite_diff_check(fn: Callable[..., Tensor], x: Union[Tensor, Sequence[Tensor]],
                      eps: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` is called with no arguments when ``x`` is a sequence of tensors
    (typically the parameters ``fn`` closes over) and with ``x`` otherwise.
    Each coordinate gets ``(f(x+eps) - f(x-eps)) / (2 eps)``; the error for a
    coordinate is ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    single = isinstance(x, Tensor)
    leaves = [x] if single else list(x)
    call = (lambda: fn(x)) if single else fn
    for leaf in leaves:
        if leaf.dtype != np.float64:
            raise GradCheckError("finite-difference checks require float64 tensors")
        leaf.data = np.ascontiguousarray(leaf.data)
        leaf.requires_grad = True
        leaf.grad = None

    out = call()
    first = _scalar(out)
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else np.array(t.grad, dtype=np.float64)
                for t in leaves]

    with no_grad():
        if _scalar(call()) != first:
            raise GradCheckError("function is not deterministic; two forward passes disagree")
        worst = 0.0
        for leaf, grad in zip(leaves, analytic):
            flat = leaf.data.reshape(-1)
            gflat = grad.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                plus = _scalar(call())
                flat[i] = orig - eps
                minus = _scalar(call())
                flat[i] = orig
                numeric = (plus - minus) / (2.0 * eps)
                denom = max(abs(numeric), abs(gflat[i]), 1e-8)
                worst = max(worst, abs(numeric - gflat[i]) / denom)
    return worst


# -- the finite-difference suite ----------------------------------------------
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    module: str
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error <= TOLERANCE


def _weights(rng, shape):
    return Tensor(rng.normal(size=shape))


def _smooth_coords(rng, shape, extent):
    """Normalized coordinates whose pixel positions stay away from integer kinks."""
    whole = rng.integers(0, extent - 1, size=shape)
    frac = rng.uniform(0.2, 0.8, size=shape)
    return (whole + frac) / (extent - 1) * 2.0 - 1.0


def check_conv2d(seed: int = 0) -> float:
    from . import functional as F
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 3, 5, 5)))
    w = Tensor(rng.normal(size=(4, 3, 3, 3)))
    b = Tensor(rng.normal(size=4))
    r = _weights(rng, (2, 4, 5, 5))
    return finite_diff_check(lambda: (F.conv2d(x, w, b) * r).sum(), [x, w, b])


def check_grid_sample(seed: int = 0) -> float:
    from . import functional as F
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 2, 5, 6)))
    gx = _smooth_coords(rng, (2, 4, 4), 6)
    gy = _smooth_coords(rng, (2, 4, 4), 5)
    grid = Tensor(np.stack([gx, gy], axis=1))
    r = _weights(rng, (2, 2, 4, 4))
    return finite_diff_check(lambda: (F.bilinear_grid_sample(x, grid) * r).sum(), [x, grid])


def check_batch_norm(seed: int = 0) -> float:
    from . import functional as F
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(4, 3, 3, 3)))
    state = F.BatchNormState(Tensor(rng.normal(size=3)), Tensor(rng.normal(size=3)),
                             rng.normal(size=3), rng.uniform(0.5, 2.0, size=3))
    r = _weights(rng, (4, 3, 3, 3))
    leaves = [x, state.gamma, state.beta]
    train = finite_diff_check(lambda: (F.batch_norm(x, state, True) * r).sum(), leaves)
    evaluation = finite_diff_check(lambda: (F.batch_norm(x, state, False) * r).sum(), leaves)
    return max(train, evaluation)


def check_spectral(seed: int = 0) -> float:
    from .layers import ParamStore
    from .spectral import SpectralMask, frequency_input
    rng = np.random.default_rng(seed)
    store = ParamStore(np.float64)
    mask = SpectralMask(store, 3)
    mask.template.data = rng.normal(size=mask.template.shape)
    x = Tensor(rng.normal(size=(2, 3, 8, 8)))
    r = _weights(rng, (2, 3, 8, 8))
    return finite_diff_check(lambda: (frequency_input(x, mask) * r).sum(), [x, mask.template])


def check_fuse(seed: int = 0) -> float:
    from .fusion import FusionHead, fuse
    from .layers import ParamStore
    rng = np.random.default_rng(seed)
    store = ParamStore(np.float64)
    head = FusionHead(store, 3, 4, rng)
    for p in store.params.values():
        p.data = rng.normal(scale=0.5, size=p.shape)
    s = Tensor(rng.normal(size=(2, 3, 4, 4)))
    f = Tensor(rng.normal(size=(2, 3, 4, 4)))
    r = _weights(rng, (2, 3, 4, 4))
    return finite_diff_check(lambda: (fuse(s, f, head)[0] * r).sum(), [s, f] + list(store.params.values()))


def _arf_fixture(seed: int):
    from .arf import ArfConfig, ArfLayer
    from .layers import ParamStore
    rng = np.random.default_rng(seed)
    store = ParamStore(np.float64)
    layer = ArfLayer(store, "arf", ArfConfig(2, 2), rng)
    for p in store.params.values():
        p.data = rng.normal(scale=0.4, size=p.shape)
    x = Tensor(rng.normal(size=(2, 2, 6, 6)))
    r = _weights(rng, (2, 2, 6, 6))
    return store, layer, x, r


def check_arf(seed: int = 3) -> float:
    """All ARF parameters and the input, with the scale heads in training mode."""
    from .arf import arf_apply, predict_scales
    store, layer, x, r = _arf_fixture(seed)
    with no_grad():
        lam_u, lam_v = predict_scales(x, layer, training=True)
    lam = np.concatenate([lam_u.data, lam_v.data])
    step = layer.config.sigma_step
    edge = np.abs(lam / step - np.round(lam / step))
    centre = np.abs(lam - layer.config.tau)
    if edge.min() < 1e-3 or centre.min() < 1e-2:
        raise GradCheckError("fixture scales sit on a discretization edge or at the offset zero")
    return finite_diff_check(lambda: (arf_apply(x, layer, training=True) * r).sum(),
                             [x] + [p for p in store.params.values() if p.requires_grad])


def check_similarity(seed: int = 0) -> float:
    from . import functional as F
    from .layers import ParamStore
    from .similarity import MetricParams, classify
    from .tensor import stack
    rng = np.random.default_rng(seed)
    store = ParamStore(np.float64)
    params = MetricParams(store, 4, 3, rng)
    params.raw_lambda1.data = np.array([0.3])
    params.raw_lambda2.data = np.array([-0.2])
    query = Tensor(rng.normal(size=(4, 2, 2)))
    support = [Tensor(rng.normal(size=(2, 4, 2, 2))) for _ in range(3)]

    def loss():
        probs = classify(query, support, params)
        return -F.log_softmax(probs.log().reshape((1, 3)), axis=-1)[0, 1]

    return finite_diff_check(loss, [query] + support + list(store.params.values()))


def check_episode_loss(seed: int = 0) -> float:
    from .layers import ParamStore
    from .similarity import MetricParams, episode_loss
    rng = np.random.default_rng(seed)
    store = ParamStore(np.float64)
    params = MetricParams(store, 3, None, rng)
    query = Tensor(rng.normal(size=(4, 3, 2, 2)))
    support = Tensor(rng.normal(size=(3, 2, 3, 2, 2)))
    labels = np.array([0, 2, 1, 2])
    return finite_diff_check(lambda: episode_loss(query, support, labels, params),
                             [query, support] + list(store.params.values()))


SUITE = {
    "conv2d": ("tensor-core", check_conv2d),
    "bilinear_grid_sample": ("tensor-core", check_grid_sample),
    "batch_norm": ("tensor-core", check_batch_norm),
    "dct2-mask-idct2": ("spectral", check_spectral),
    "fuse": ("fusion", check_fuse),
    "arf_apply": ("arf", check_arf),
    "classify-cross_entropy": ("similarity", check_similarity),
    "episode_loss": ("similarity", check_episode_loss),
}
MODULES = tuple(sorted({m for m, _ in SUITE.values()}))


def run_suite(module: Optional[str] = None) -> List[CheckResult]:
    if module is not None and module not in MODULES:
        raise GradCheckError(f"unknown module {module!r}; choose from {', '.join(MODULES)}")
    results = []
    for name, (owner, fn) in SUITE.items():
        if module is not None and owner != module:
            continue
        start = time.perf_counter()
        err = fn()
        results.append(CheckResult(name, owner, err, time.perf_counter() - start))
    return results


def format_table(results: Sequence[CheckResult]) -> str:
    lines = [f"{'check':<24}{'module':<13}{'max rel err':>12}  result"]
    for r in results:
        lines.append(f"{r.name:<24}{r.module:<13}{r.error:>12.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
