"""Frozen-backbone fine-tuning on synthetic class-conditional tasks.

Only the adapter bank and the classification head receive gradient
updates; everything else in the backbone stays bit-identical, which the
frozen checksum makes checkable. The optimizer is AdamW with decoupled
weight decay, linear warmup, and cosine (or constant) decay.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import model
from .adapters import AdapterBank, resolve_hooks
from .autodiff import Eager, Tape, backward
from .errors import ConfigError, TrainingAborted
from .kernel import Rng, cross_entropy

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    lr: float
    epochs: int
    batch_size: int
    weight_decay: float = 0.0
    warmup_epochs: int = 0
    schedule: str = "cosine"
    seed: int = 0
    dropout_rate: float | None = None  # None: use the bank's configured rate
    optimizer: str = "adamw"

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError(
                f"warmup_epochs must lie in [0, epochs], got {self.warmup_epochs}"
            )
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"schedule must be 'cosine' or 'constant', got {self.schedule!r}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.optimizer != "adamw":
            raise ConfigError(f"only the adamw optimizer is implemented, got {self.optimizer!r}")


@dataclass(frozen=True)
class SyntheticTask:
    """Class-conditional Gaussian images around per-class mean images."""

    classes: int
    image_size: int
    channels: int = 1
    noise_sigma: float = 0.0
    train_count: int = 32
    eval_count: int = 16
    mean_scale: float = 1.0

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        if self.train_count < self.classes:
            raise ConfigError("train_count must cover every class at least once")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass
class Dataset:
    train_images: np.ndarray
    train_labels: np.ndarray
    eval_images: np.ndarray
    eval_labels: np.ndarray
    class_means: np.ndarray


def make_task(task: SyntheticTask, rng: Rng) -> Dataset:
    """Deterministic dataset: labels round-robin over classes (so counts
    divisible by the class count come out exactly balanced), images are the
    class mean plus sigma-scaled Gaussian noise."""
    shape = (task.image_size, task.image_size, task.channels)
    means = np.stack([rng.normals(shape, task.mean_scale) for _ in range(task.classes)])

    def draw(count: int):
        labels = np.array([i % task.classes for i in range(count)])
        images = np.stack([
            means[label] + task.noise_sigma * rng.normals(shape) for label in labels
        ])
        return images, labels

    train_x, train_y = draw(task.train_count)
    eval_x, eval_y = draw(task.eval_count)
    return Dataset(train_x, train_y, eval_x, eval_y, means)


class AdamW:
    """Adam moments plus decoupled, schedule-scaled weight decay.

    With gradient zero, one step multiplies the parameter by exactly
    (1 - lr_t * weight_decay): the decay path never touches the moments.
    """

    def __init__(self, weight_decay: float = 0.0):
        self.weight_decay = weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr_t: float) -> None:
        self.t += 1
        for name in sorted(params):
            p = params[name]
            g = grads.get(name)
            decay = lr_t * self.weight_decay * p
            if g is not None:
                if name not in self.m:
                    self.m[name] = np.zeros_like(p)
                    self.v[name] = np.zeros_like(p)
                m = self.m[name]
                v = self.v[name]
                m *= ADAM_BETA1
                m += (1 - ADAM_BETA1) * g
                v *= ADAM_BETA2
                v += (1 - ADAM_BETA2) * (g * g)
                m_hat = m / (1 - ADAM_BETA1 ** self.t)
                v_hat = v / (1 - ADAM_BETA2 ** self.t)
                p -= lr_t * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
            p -= decay


def schedule_scale(cfg: TrainConfig, step: int, total_steps: int, warmup_steps: int) -> float:
    """Linear warmup from zero, then cosine decay to zero (or constant)."""
    if warmup_steps > 0 and step < warmup_steps:
        return step / warmup_steps
    if cfg.schedule == "constant":
        return 1.0
    span = max(total_steps - warmup_steps, 1)
    return 0.5 * (1.0 + math.cos(math.pi * (step - warmup_steps) / span))


@dataclass
class StepRecord:
    step: int
    lr: float
    loss: float
    accuracy: float


@dataclass
class TrainResult:
    curve: list[StepRecord] = field(default_factory=list)
    steps: int = 0

    @property
    def final_loss(self) -> float:
        return self.curve[-1].loss if self.curve else float("nan")


def train(backbone_cfg, weights, bank: AdapterBank | None, data: Dataset,
          cfg: TrainConfig, max_steps: int | None = None) -> TrainResult:
    """Fine-tune bank + head in place; the rest of the backbone is frozen.

    ``bank=None`` trains the head alone (linear probing). Raises
    TrainingAborted on a non-finite loss.
    """
    hooks = resolve_hooks(bank.config, backbone_cfg) if bank is not None else None
    dropout = cfg.dropout_rate
    trainable: dict[str, np.ndarray] = {name: weights[name] for name in model.HEAD_NAMES}
    if bank is not None:
        trainable.update(bank.tensors)
    opt = AdamW(weight_decay=cfg.weight_decay)
    rng = Rng(cfg.seed)
    n = data.train_images.shape[0]
    batches_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * batches_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    warmup_steps = cfg.warmup_epochs * batches_per_epoch
    result = TrainResult()
    max_grad_seen = 0.0
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for b in range(batches_per_epoch):
            if step >= total_steps:
                return result
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            lr_t = cfg.lr * schedule_scale(cfg, step, total_steps, warmup_steps)
            tape = Tape()
            values = {
                name: tape.parameter(name, arr, trainable=(name in trainable))
                for name, arr in weights.items()
            }
            if bank is not None:
                for name, arr in bank.tensors.items():
                    values[name] = tape.parameter(name, arr, trainable=True)
            rows = [
                model.forward(tape, backbone_cfg, values, data.train_images[i],
                              hooks=hooks, mode="train", rng=rng, dropout_rate=dropout)
                for i in idx
            ]
            logits = tape.concat_rows(rows) if len(rows) > 1 else rows[0]
            labels = data.train_labels[idx]
            loss_node = tape.cross_entropy(logits, labels)
            loss = float(loss_node.value[0, 0])
            if not math.isfinite(loss):
                raise TrainingAborted(step=step, lr=lr_t, max_grad=max_grad_seen)
            grads = backward(tape, loss_node)
            max_grad_seen = max(
                max_grad_seen, max((float(np.abs(g).max()) for g in grads.values()), default=0.0)
            )
            accuracy = float((logits.value.argmax(axis=1) == labels).mean())
            opt.step(trainable, grads, lr_t)
            result.curve.append(StepRecord(step=step, lr=lr_t, loss=loss, accuracy=accuracy))
            step += 1
            result.steps = step
    return result


def evaluate(backbone_cfg, weights, bank: AdapterBank | None, images, labels):
    """(mean loss, accuracy) of the eval-mode forward over a labeled set."""
    hooks = resolve_hooks(bank.config, backbone_cfg) if bank is not None else None
    values = dict(weights)
    if bank is not None:
        values.update(bank.tensors)
    ops = Eager()
    logits = np.concatenate([
        model.forward(ops, backbone_cfg, values, img, hooks=hooks) for img in images
    ])
    labels = np.asarray(labels)
    loss = cross_entropy(logits, labels)
    accuracy = float((logits.argmax(axis=1) == labels).mean())
    return loss, accuracy


def write_loss_csv(curve: list[StepRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss", "accuracy"])
        for rec in curve:
            writer.writerow([rec.step, f"{rec.lr:.12g}", f"{rec.loss:.12g}", f"{rec.accuracy:.6g}"])
