"""Episodic training, learning-rate schedules, evaluation and snapshot ensembles."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, TextIO

import numpy as np

from .episodes import STREAM_TEST, STREAM_TRAIN, STREAM_VAL, Dataset, Episode, EpisodeStream
from .errors import ConfigurationError, EpisodeError, TrainingError
from .io import decode_checkpoint, encode_checkpoint
from .model import FewShotModel, ModelConfig

SCHEDULES = ("step", "cosine")


@dataclass(frozen=True)
class EvalConfig:
    way: int = 5
    shot: int = 5
    query: int = 15
    episodes: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.way < 2 or self.shot < 1 or self.query < 1 or self.episodes < 1:
            raise ConfigurationError("eval needs way >= 2, shot >= 1, query >= 1 and episodes >= 1")


@dataclass(frozen=True)
class TrainConfig:
    way: int = 5
    shot: int = 5
    query: int = 5
    epochs: int = 100
    episodes_per_epoch: int = 50
    lr_init: float = 0.1
    schedule: str = "step"
    step_period: int = 40
    lr_min: float = 1e-4
    snapshots: int = 1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    nesterov: bool = True
    grad_clip: float = 1.0
    val_every: int = 20
    val_episodes: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.way < 2 or self.shot < 1 or self.query < 1:
            raise ConfigurationError("training needs way >= 2, shot >= 1 and query >= 1")
        if self.epochs < 1 or self.episodes_per_epoch < 1:
            raise ConfigurationError("epochs and episodes_per_epoch must be >= 1")
        if self.lr_init < 0 or self.lr_min < 0:
            raise ConfigurationError("learning rates must be >= 0")
        if self.step_period < 1:
            raise ConfigurationError("step_period must be >= 1")
        if self.snapshots < 1 or self.snapshots > self.epochs:
            raise ConfigurationError("snapshots must lie in [1, epochs]")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigurationError("weight_decay and grad_clip must be >= 0")
        if self.val_every < 0 or self.val_episodes < 1:
            raise ConfigurationError("val_every must be >= 0 and val_episodes >= 1")

    @property
    def cycle_epochs(self) -> int:
        return max(self.epochs // self.snapshots, 1)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Learning rate used throughout ``epoch`` (0-based).

    Cosine mode anneals from ``lr_init`` at the first epoch of each cycle to
    ``lr_min`` at its last epoch, where a snapshot is taken.
    """
    if epoch < 0:
        raise ConfigurationError("epoch must be >= 0")
    if config.schedule == "step":
        return config.lr_init * 10.0 ** (-(epoch // config.step_period))
    period = config.cycle_epochs
    t = min(epoch, config.snapshots * period - 1) % period
    frac = t / (period - 1) if period > 1 else 0.0
    return config.lr_min + 0.5 * (config.lr_init - config.lr_min) * (1.0 + math.cos(math.pi * frac))


class NesterovSGD:
    """SGD with (Nesterov) momentum and L2 weight decay, torch-style update order."""

    def __init__(self, params: Dict, momentum: float = 0.9, weight_decay: float = 5e-4,
                 nesterov: bool = True, grad_clip: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov
        self.grad_clip = grad_clip
        self.buffers = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float) -> None:
        grads = {name: p.grad for name, p in self.params.items() if p.grad is not None}
        if self.grad_clip > 0:
            norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
                grads = {n: g * np.asarray(scale, dtype=g.dtype) for n, g in grads.items()}
        for name, g in grads.items():
            p = self.params[name]
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            buf = self.buffers[name]
            buf *= self.momentum
            buf += g
            update = g + self.momentum * buf if self.nesterov else buf
            p.data = (p.data - lr * update).astype(p.data.dtype)

    def state(self) -> Dict[str, np.ndarray]:
        return {f"optim.momentum.{name}": buf for name, buf in self.buffers.items()}

    def load_state(self, tensors: Dict[str, np.ndarray]) -> None:
        for name in self.buffers:
            key = f"optim.momentum.{name}"
            if key in tensors:
                self.buffers[name] = np.array(tensors[key], dtype=self.buffers[name].dtype)


@dataclass
class Checkpoint:
    """Named tensors (parameters, BN statistics, momentum buffers, ``meta.epoch``) plus the config hash."""

    tensors: Dict[str, np.ndarray]
    config_hash: bytes
    model_config: Optional[ModelConfig] = field(default=None, compare=False)

    @property
    def epoch(self) -> int:
        return int(self.tensors["meta.epoch"][0]) if "meta.epoch" in self.tensors else -1

    def to_bytes(self) -> bytes:
        return encode_checkpoint(self.tensors, self.config_hash)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes, model_config: Optional[ModelConfig] = None) -> "Checkpoint":
        tensors, config_hash = decode_checkpoint(data)
        return cls(tensors, config_hash, model_config)

    @classmethod
    def load(cls, path, model_config: Optional[ModelConfig] = None) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes(), model_config)


def capture(model: FewShotModel, optimizer: Optional[NesterovSGD], epoch: int) -> Checkpoint:
    tensors = {name: np.array(arr) for name, arr in model.state().items()}
    if optimizer is not None:
        tensors.update({k: np.array(v) for k, v in optimizer.state().items()})
    tensors["meta.epoch"] = np.array([epoch], dtype=np.float64)
    return Checkpoint(tensors, model.config.hash(), model.config)


def model_from_checkpoint(checkpoint: Checkpoint, config: Optional[ModelConfig] = None) -> FewShotModel:
    config = config or checkpoint.model_config
    if config is None:
        raise ConfigurationError("a model configuration is needed to rebuild this checkpoint")
    if config.hash() != checkpoint.config_hash:
        raise ConfigurationError("checkpoint was written for a different architecture configuration")
    model = FewShotModel(config)
    model.load_state(checkpoint.tensors)
    return model


@dataclass
class TrainLog:
    lines: List[str] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    validation: List[tuple] = field(default_factory=list)  # (epoch, mean_acc, ci95)

    def text(self) -> str:
        return "".join(line + "\n" for line in self.lines)


def _emit(log: TrainLog, sink: Optional[TextIO], line: str) -> None:
    log.lines.append(line)
    if sink is not None:
        sink.write(line + "\n")
        sink.flush()


def train(model: FewShotModel, splits: Dict[str, Dataset], config: TrainConfig,
          log_file: Optional[TextIO] = None,
          on_step: Optional[Callable[[int, float], None]] = None) -> tuple:
    """Episodic SGD; one episode is one optimisation step.

    Returns ``(checkpoints, log)``.  With ``snapshots > 1`` the checkpoints
    are taken at the end of every cosine cycle; otherwise the list holds the
    best-validation checkpoint (or the final one when there is no val split).
    """
    train_set = splits["train"] if isinstance(splits, dict) else splits
    val_set = splits.get("val") if isinstance(splits, dict) else None
    if train_set.num_classes < config.way:
        raise EpisodeError(f"train split has {train_set.num_classes} classes; {config.way}-way training needs "
                           f"{config.way - train_set.num_classes} more")
    stream = EpisodeStream(train_set, config.way, config.shot, config.query, config.seed, STREAM_TRAIN)
    optimizer = NesterovSGD(model.params, config.momentum, config.weight_decay, config.nesterov,
                            config.grad_clip)
    val_config = EvalConfig(way=config.way, shot=config.shot, query=15 if val_set is None else
                            max(1, min(15, min(len(c) for c in val_set.classes) - config.shot)),
                            episodes=config.val_episodes, seed=config.seed)
    log = TrainLog()
    snapshots: List[Checkpoint] = []
    best: Optional[tuple] = None
    step = 0
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        for _ in range(config.episodes_per_epoch):
            episode = stream.episode(step)
            model.store.zero_grad()
            loss = model.episode_loss(episode, training=True)
            value = float(loss.data)
            if not np.isfinite(value):
                msg = (f"non-finite loss at epoch {epoch} step {step}; episode seed "
                       f"(seed={config.seed}, stream={STREAM_TRAIN}, index={step})")
                _emit(log, log_file, f"# {msg}")
                raise TrainingError(msg)
            loss.backward()
            optimizer.step(lr)
            _emit(log, log_file, f"{epoch}\t{step}\t{value:.6f}\t{lr:.6g}")
            log.losses.append(value)
            if on_step is not None:
                on_step(step, value)
            step += 1
        last = epoch == config.epochs - 1
        if config.snapshots > 1 and (epoch + 1) % config.cycle_epochs == 0 \
                and len(snapshots) < config.snapshots:
            snapshots.append(capture(model, optimizer, epoch))
        if val_set is not None and config.val_every and ((epoch + 1) % config.val_every == 0 or last):
            mean, ci = evaluate(model, val_set, val_config, stream_id=STREAM_VAL)
            log.validation.append((epoch, mean, ci))
            if best is None or mean > best[0]:
                best = (mean, capture(model, optimizer, epoch))
    if config.snapshots > 1:
        return snapshots, log
    if best is not None:
        return [best[1]], log
    return [capture(model, optimizer, config.epochs - 1)], log


# -- evaluation ---------------------------------------------------------------
class OraclePredictor:
    """Always assigns probability one to the true query label."""

    def prepare(self, dataset: Dataset):
        def probabilities(episode: Episode) -> np.ndarray:
            return np.eye(episode.way)[episode.query_labels]
        return probabilities


class RandomPredictor:
    """Uniformly random class scores; chance-level reference."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def prepare(self, dataset: Dataset):
        rng = np.random.default_rng(self.seed)

        def probabilities(episode: Episode) -> np.ndarray:
            p = rng.random((len(episode.query_labels), episode.way))
            return p / p.sum(axis=1, keepdims=True)
        return probabilities


class Ensemble:
    """Arithmetic mean of member probabilities; members must share one architecture."""

    def __init__(self, members: Sequence):
        if not members:
            raise ConfigurationError("an ensemble needs at least one member")
        hashes = {m.config.hash() for m in members if hasattr(m, "config")}
        if len(hashes) > 1:
            raise ConfigurationError("ensemble members use different architecture configurations")
        self.members = list(members)

    def prepare(self, dataset: Dataset):
        fns = [m.prepare(dataset) for m in self.members]

        def probabilities(episode: Episode) -> np.ndarray:
            return average_probabilities([fn(episode) for fn in fns])
        return probabilities

    def predict_proba(self, episode: Episode) -> np.ndarray:
        return average_probabilities([m.predict_proba(episode) for m in self.members])


def average_probabilities(probs: Sequence[np.ndarray]) -> np.ndarray:
    if len(probs) == 0:
        raise ConfigurationError("nothing to average")
    return np.mean(np.stack([np.asarray(p, dtype=np.float64) for p in probs]), axis=0)


def ensemble_from_checkpoints(checkpoints: Sequence[Checkpoint], config: Optional[ModelConfig] = None) -> Ensemble:
    if not checkpoints:
        raise ConfigurationError("at least one checkpoint is required")
    if len({c.config_hash for c in checkpoints}) > 1:
        raise ConfigurationError("checkpoints were written for different architecture configurations")
    return Ensemble([model_from_checkpoint(c, config) for c in checkpoints])


def ensemble_classify(checkpoints: Sequence[Checkpoint], episode: Episode,
                      config: Optional[ModelConfig] = None) -> np.ndarray:
    """Mean of the per-checkpoint probability matrices ``[Nq, N]``."""
    return ensemble_from_checkpoints(checkpoints, config).predict_proba(episode)


def episode_accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def summarize(accuracies: Sequence[float]) -> tuple:
    """``(mean %, 1.96 * std / sqrt(n) %)`` of per-episode accuracies in [0, 1]."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size == 0:
        raise ConfigurationError("no episodes to summarize")
    return 100.0 * float(acc.mean()), 100.0 * 1.96 * float(acc.std()) / math.sqrt(acc.size)


def episode_accuracies(predictor, dataset: Dataset, config: EvalConfig, stream_id: int = STREAM_TEST) -> np.ndarray:
    probabilities = predictor.prepare(dataset)
    stream = EpisodeStream(dataset, config.way, config.shot, config.query, config.seed, stream_id)
    return np.array([episode_accuracy(probabilities(ep), ep.query_labels)
                     for ep in stream.take(config.episodes)])


def evaluate(predictor, dataset: Dataset, config: EvalConfig = EvalConfig(),
             stream_id: int = STREAM_TEST) -> tuple:
    """Mean episode accuracy and its 95% interval, both in percent."""
    return summarize(episode_accuracies(predictor, dataset, config, stream_id))


def format_result(mean: float, ci: float) -> str:
    return f"{mean:.2f} ± {ci:.2f}"
