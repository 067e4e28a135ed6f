"""Sectioned plain-text run configuration.

Format::

    # comment
    [data]
    difficulty = 0.5
    [encoder]
    widths = 8,16,32,32

Sections are ``[data]``, ``[encoder]``, ``[metric]``, ``[train]`` and
``[eval]``; every key is optional and unknown keys are rejected.  Any
problem is reported as a :class:`ConfigurationError` naming the line.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

from .encoder import EncoderConfig
from .episodes import SyntheticSpec
from .errors import ConfigurationError
from .model import ModelConfig
from .trainer import EvalConfig, TrainConfig


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _opt_int(text: str) -> Optional[int]:
    return None if text.lower() in ("none", "") else int(text)


def _str(text: str) -> str:
    return text


SCHEMA: Dict[str, Dict[str, Callable[[str], object]]] = {
    "data": dict(train_classes=int, val_classes=int, test_classes=int, samples_per_class=int,
                 image_size=int, channels=int, difficulty=float, seed=int),
    "encoder": dict(backbone=_str, widths=_ints, arf_placement=_str, branch_mode=_str, rho_max=int,
                    sigma_step=int, kappa=float, image_size=int, leaky_slope=float, frozen_bank=_bool,
                    tie_branches=_bool, fusion_hidden=_opt_int, seed=int),
    "metric": dict(proj_dim=_opt_int, lambda_init=float),
    "train": dict(way=int, shot=int, query=int, epochs=int, episodes_per_epoch=int, lr_init=float,
                  schedule=_str, step_period=int, lr_min=float, snapshots=int, momentum=float,
                  weight_decay=float, nesterov=_bool, grad_clip=float, val_every=int, val_episodes=int,
                  seed=int),
    "eval": dict(way=int, shot=int, query=int, episodes=int, seed=int),
}


@dataclass(frozen=True)
class DataConfig:
    train_classes: int = 30
    val_classes: int = 10
    test_classes: int = 10
    samples_per_class: int = 40
    image_size: int = 32
    channels: int = 3
    difficulty: float = 0.5
    seed: int = 7

    def __post_init__(self):
        if min(self.train_classes, self.val_classes, self.test_classes) < 0:
            raise ConfigurationError("class counts must be >= 0")
        if self.train_classes + self.val_classes + self.test_classes < 2:
            raise ConfigurationError("a dataset needs at least 2 classes")

    def synthetic_spec(self) -> SyntheticSpec:
        total = self.train_classes + self.val_classes + self.test_classes
        return SyntheticSpec(total, self.samples_per_class, self.image_size, self.channels, self.difficulty)


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    model_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _tokenize(text: str) -> Dict[str, Dict[str, tuple]]:
    """``section -> key -> (raw value, line number)``; also records section header lines."""
    sections: Dict[str, Dict[str, tuple]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigurationError(f"line {lineno}: malformed section header {raw.strip()!r}")
            current = line[1:-1].strip()
            if current not in SCHEMA:
                raise ConfigurationError(f"line {lineno}: unknown section [{current}]; "
                                         f"expected one of {', '.join(SCHEMA)}")
            if current in sections:
                raise ConfigurationError(f"line {lineno}: section [{current}] appears twice")
            sections[current] = {"__line__": (None, lineno)}
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        if current is None:
            raise ConfigurationError(f"line {lineno}: key outside of any section")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA[current]:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r} in [{current}]; "
                                     f"valid keys: {', '.join(SCHEMA[current])}")
        if key in sections[current]:
            raise ConfigurationError(f"line {lineno}: key {key!r} repeated in [{current}]")
        sections[current][key] = (value, lineno)
    return sections


def _values(sections, name: str) -> tuple:
    entries = sections.get(name, {})
    header = entries.get("__line__", (None, 0))[1]
    out = {}
    for key, (raw, lineno) in entries.items():
        if key == "__line__":
            continue
        try:
            out[key] = SCHEMA[name][key](raw)
        except ValueError as exc:
            raise ConfigurationError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    return out, header


def _build(factory, kwargs: dict, header: int, name: str):
    try:
        return factory(**kwargs)
    except ConfigurationError as exc:
        where = f"line {header} ([{name}])" if header else f"[{name}] defaults"
        raise ConfigurationError(f"{where}: {exc}") from None


def parse_config(text: str) -> RunConfig:
    sections = _tokenize(text)
    data_kw, data_line = _values(sections, "data")
    enc_kw, enc_line = _values(sections, "encoder")
    # image_size may be given in either section; the data generator and encoder must agree
    if "image_size" in enc_kw:
        size = enc_kw.pop("image_size")
        if data_kw.setdefault("image_size", size) != size:
            line = sections["encoder"]["image_size"][1]
            raise ConfigurationError(f"line {line}: [encoder] image_size {size} disagrees with "
                                     f"[data] image_size {data_kw['image_size']}")
    data = _build(DataConfig, data_kw, data_line, "data")

    model_seed = enc_kw.pop("seed", 0)
    enc_kw.update(image_size=data.image_size, in_channels=data.channels)
    encoder = _build(EncoderConfig, enc_kw, enc_line, "encoder")

    metric_kw, metric_line = _values(sections, "metric")
    model = _build(lambda **kw: ModelConfig(encoder, **kw), metric_kw, metric_line, "metric")

    train_kw, train_line = _values(sections, "train")
    train = _build(TrainConfig, train_kw, train_line, "train")
    eval_kw, eval_line = _values(sections, "eval")
    eval_ = _build(EvalConfig, eval_kw, eval_line, "eval")
    return RunConfig(data, model, model_seed, train, eval_)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        return parse_config(text)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
