"""
Training configuration, Adam with decoupled weight decay, global-norm
clipping and the epoch loop.

A batch is a list of whole sessions. Forward and backward passes of the
sessions in a batch may run on a thread pool, each building its own graph
over the shared parameter tensors; gradients are summed in batch order
before a single optimizer step.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np
import yaml
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from sanmove.src.autodiff import Tensor, gradients, global_norm
from sanmove.src.data_pipeline import PreparedDataset
from sanmove.src.errors import ConfigError, DataError
from sanmove.src.logger_download import logger
from sanmove.src.predictor import ModelParams, Recommender, SanMoveModel, SequenceExample
from sanmove.src.stnova import StnovaMode

BASE_DIR = os.path.dirname(os.path.abspath(__file__))
CONFIG_PATH = os.path.join(BASE_DIR, "configs", "sanmove.cfg.yml")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr: float = Field(1e-4, ge=0)
    weight_decay: float = Field(1e-5, ge=0)
    d: int = Field(64, gt=0)
    n_layers: int = Field(1, ge=1, le=3)
    n_heads: int = Field(1, ge=1, le=8)
    mode: StnovaMode = StnovaMode.FULL
    clip_norm: float = Field(5.0, gt=0)
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(1, ge=1)
    workers: int = Field(1, ge=1)
    seed: int = 0
    l_max: int = Field(128, ge=1)
    readout: str = "last"
    gamma_placement: str = "logits"
    tie_weights: bool = False
    init_std: float = Field(0.02, gt=0)
    lr_patience: int = Field(3, ge=1)
    lr_factor: float = Field(0.5, gt=0, le=1)

    @field_validator("d")
    @classmethod
    def check_even(cls, value):
        if value % 2:
            raise ValueError(f"d must be even for the time encoding, got {value}")
        return value

    @field_validator("readout")
    @classmethod
    def check_readout(cls, value):
        if value not in ("last", "mean"):
            raise ValueError(f"readout must be 'last' or 'mean', got {value!r}")
        return value

    @field_validator("gamma_placement")
    @classmethod
    def check_gamma_placement(cls, value):
        if value not in ("logits", "weights"):
            raise ValueError(f"gamma_placement must be 'logits' or 'weights', got {value!r}")
        return value

    @model_validator(mode="after")
    def check_heads(self):
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        return self

    @classmethod
    def from_preset(cls, name: str = "desk", path: str = CONFIG_PATH, **overrides) -> "TrainConfig":
        with open(path) as f:
            presets = yaml.safe_load(f)
        if name not in presets:
            raise ConfigError(f"unknown preset {name!r}; known: {sorted(presets)}")
        return build_config({**presets[name], **overrides})

    def to_yaml(self, path: str) -> None:
        with open(path, "w") as f:
            yaml.safe_dump(self.model_dump(mode="json"), f, sort_keys=True)

    @classmethod
    def from_yaml(cls, path: str) -> "TrainConfig":
        with open(path) as f:
            return build_config(yaml.safe_load(f) or {})


def build_config(values: dict) -> TrainConfig:
    """Validate raw values; every failure surfaces as `ConfigError`."""
    try:
        return TrainConfig(**values)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def parse_config_text(text: str) -> dict[str, str]:
    values = {}
    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_number}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {line_number}: empty key")
        values[key] = value
    return values


def load_config(path: str) -> TrainConfig:
    """
    Read a `key = value` config file.

    An optional `preset` key selects the base preset (default "desk"); the
    remaining keys override it.

    Raises
    ------
    ConfigError
        On syntax errors, unknown keys or invalid values.
    """
    with open(path) as f:
        values = parse_config_text(f.read())
    preset = values.pop("preset", "desk")
    unknown = sorted(set(values) - set(TrainConfig.model_fields))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return TrainConfig.from_preset(preset, **values)


def clip_grad_norm(
    grads: Sequence[NDArray[np.float64]], max_norm: float
) -> tuple[list[NDArray[np.float64]], float]:
    """Scale all gradients together so their global L2 norm is at most `max_norm`."""
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return list(grads), norm
    factor = max_norm / norm
    return [g * factor for g in grads], norm


PAD_TABLES = ("embeddings.location", "lstm.embedding")


def _decays(name: str, param: Tensor) -> bool:
    # biases are 1-d
    return param.data.ndim >= 2


class AdamOptimizer:
    """
    Adam with decoupled weight decay.

    Biases are not decayed, and row 0 of every table named in `pad_tables`
    is never updated.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-4,
        weight_decay: float = 1e-5,
        pad_tables: Sequence[str] = (),
    ):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.pad_tables = tuple(pad_tables)
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, grads: dict[str, NDArray[np.float64]]) -> bool:
        """
        Apply one update in place; returns False when the step was skipped
        because a gradient is not finite.
        """
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                logger.warning(f"[Trainer] Non-finite gradient in {name}, optimizer step skipped")
                return False
        self.t += 1
        bias1 = 1.0 - ADAM_BETA1**self.t
        bias2 = 1.0 - ADAM_BETA2**self.t
        for name, param in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(param.data)
            m = self.m[name] = ADAM_BETA1 * self.m[name] + (1.0 - ADAM_BETA1) * g
            v = self.v[name] = ADAM_BETA2 * self.v[name] + (1.0 - ADAM_BETA2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)
            if self.weight_decay and _decays(name, param):
                update = update + self.weight_decay * param.data
            if name in self.pad_tables:
                update[0] = 0.0
            param.data -= self.lr * update
        return True


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, NDArray[np.float64]],
    state: Optional[AdamOptimizer],
    config: TrainConfig,
) -> AdamOptimizer:
    """
    Functional form of one optimizer step; creates the state on first use.
    Pad rows of the embedding tables among `params` stay frozen as in `Trainer`.
    """
    if state is None:
        pad_tables = [name for name in PAD_TABLES if name in params]
        state = AdamOptimizer(params, lr=config.lr, weight_decay=config.weight_decay, pad_tables=pad_tables)
    state.step(grads)
    return state


class EpochReport(BaseModel):
    epoch: int
    mean_loss: float
    wall_time_s: float
    examples_per_sec: float
    n_examples: int
    n_steps: int
    skipped_steps: int = 0
    lr: float


def _loss_and_grads(
    model: Recommender, example: SequenceExample, names: list[str]
) -> tuple[float, list[NDArray[np.float64]]]:
    params = model.parameters()
    loss = model.calculate_loss(example)
    return loss.item(), gradients(loss, [params[name] for name in names])


def train_epoch(
    model: Recommender,
    examples: Sequence[SequenceExample],
    optimizer: AdamOptimizer,
    config: TrainConfig,
    epoch: int = 0,
) -> EpochReport:
    """
    One pass over `examples` in a seeded shuffled order.

    Raises
    ------
    DataError
        If there are no training examples.
    """
    if not examples:
        raise DataError("no training examples: every user needs at least two training sessions")
    order = np.random.default_rng([config.seed, epoch]).permutation(len(examples))
    names = sorted(model.parameters())
    total_loss = 0.0
    n_steps = skipped = 0

    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    start = time.perf_counter()
    try:
        for lo in range(0, len(order), config.batch_size):
            batch = [examples[i] for i in order[lo : lo + config.batch_size]]
            if pool is not None:
                results = list(pool.map(lambda ex: _loss_and_grads(model, ex, names), batch))
            else:
                results = [_loss_and_grads(model, ex, names) for ex in batch]

            summed = [np.zeros_like(g) for g in results[0][1]]
            for loss_value, grads in results:
                total_loss += loss_value
                for acc, g in zip(summed, grads):
                    acc += g
            averaged = [g / len(batch) for g in summed]
            clipped, _ = clip_grad_norm(averaged, config.clip_norm)
            if optimizer.step(dict(zip(names, clipped))):
                n_steps += 1
            else:
                skipped += 1
    finally:
        if pool is not None:
            pool.shutdown()
    wall = max(time.perf_counter() - start, 1e-9)

    return EpochReport(
        epoch=epoch,
        mean_loss=total_loss / len(examples),
        wall_time_s=wall,
        examples_per_sec=len(examples) / wall,
        n_examples=len(examples),
        n_steps=n_steps,
        skipped_steps=skipped,
        lr=optimizer.lr,
    )


def build_model(dataset: PreparedDataset, config: TrainConfig) -> SanMoveModel:
    """Freshly initialised SanMove model for `dataset`; `config.seed` fixes the weights."""
    rng = np.random.default_rng(config.seed)
    params = ModelParams.initialize(
        dataset.vocab.n_users,
        dataset.vocab.n_locations,
        config.d,
        config.n_layers,
        rng,
        init_std=config.init_std,
        tie_weights=config.tie_weights,
    )
    return SanMoveModel.from_config(config, params, dataset.slot_table)


class Trainer:
    """Runs epochs and halves the learning rate when the training loss plateaus."""

    def __init__(self, model: Recommender, config: TrainConfig):
        self.model = model
        self.config = config
        pad_tables = model.pad_tables() if hasattr(model, "pad_tables") else ()
        self.optimizer = AdamOptimizer(
            model.parameters(),
            lr=config.lr,
            weight_decay=config.weight_decay,
            pad_tables=pad_tables,
        )
        self.best_loss = math.inf
        self.stale_epochs = 0

    def _adjust_lr(self, loss: float) -> None:
        if loss < self.best_loss:
            self.best_loss = loss
            self.stale_epochs = 0
            return
        self.stale_epochs += 1
        if self.stale_epochs >= self.config.lr_patience:
            self.optimizer.lr *= self.config.lr_factor
            self.stale_epochs = 0
            logger.info(f"[Trainer] Loss plateau, learning rate lowered to {self.optimizer.lr:.3g}")

    def fit(self, examples: Sequence[SequenceExample], epochs: Optional[int] = None) -> list[EpochReport]:
        reports = []
        for epoch in range(epochs or self.config.epochs):
            report = train_epoch(self.model, examples, self.optimizer, self.config, epoch)
            logger.info(
                f"[Trainer] Epoch {epoch + 1}: loss {report.mean_loss:.4f}, "
                f"{report.examples_per_sec:.1f} examples/s"
            )
            self._adjust_lr(report.mean_loss)
            reports.append(report)
        return reports
