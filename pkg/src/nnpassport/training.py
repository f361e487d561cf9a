"""Training under the public/hidden parameter split.

Only public parameters (convolution and dense weights plus any trainable
scale/shift vectors) are optimized. Derived scale/shift values are recomputed
from the weights and the bound passport on every forward pass, so the loss is
the plain task loss with no passport term.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import ops
from .data import Dataset
from .errors import DataError, NumericsError, PassportError, ShapeError
from .layers import derive_hidden_params
from .models import ProtectedModel
from .rng import stream
from .tensor import Tensor, backward, no_grad

FROM_SCRATCH = "from_scratch"
FROM_PRETRAINED = "from_pretrained"


@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    step_size: int = 5
    step_gamma: float = 0.1
    init_mode: str = FROM_SCRATCH
    seed: int = 0
    telemetry: bool = False
    monitored_layers: list[int] | None = None
    hflip: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.schedule not in ("cosine", "step", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.init_mode not in (FROM_SCRATCH, FROM_PRETRAINED):
            raise ValueError(f"unknown init_mode {self.init_mode!r}")

    def lr_at(self, epoch: int) -> float:
        if self.schedule == "cosine":
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / max(self.epochs, 1)))
        if self.schedule == "step":
            return self.lr * self.step_gamma ** (epoch // self.step_size)
        return self.lr

    def to_dict(self) -> dict:
        return asdict(self)


def partition_parameters(model: ProtectedModel) -> tuple[dict[str, Tensor], list[str]]:
    """Split into trainable public parameters and the names of derived (hidden) values."""
    derived = []
    for b_i, block in enumerate(model.blocks):
        for c_i, pl in enumerate(block.passports):
            key = f"block{b_i}.pass{c_i}"
            if pl.kind is None:
                continue
            entries = model.passport.entry_map() if hasattr(model.passport, "entry_map") else (model.passport or {})
            if pl.layer_index not in entries:
                raise PassportError(f"passporting layer {pl.layer_index} has no bound passport")
            if pl.derives_gamma:
                derived.append(f"{key}.gamma")
            if pl.derives_beta:
                derived.append(f"{key}.beta")
    return model.named_parameters(), derived


def init_weights(model: ProtectedModel, mode: str = FROM_SCRATCH, seed: int = 0,
                 pretrained: ProtectedModel | Mapping[str, np.ndarray] | None = None) -> ProtectedModel:
    """He-normal initialization, or copy public weights from a pretrained network."""
    params = model.named_parameters()
    if mode == FROM_SCRATCH:
        rng = stream(seed, "init")
        for b_i, block in enumerate(model.blocks):
            for c_i, conv in enumerate(block.convs):
                conv.weight.data = rng.normal(0.0, math.sqrt(2.0 / conv.fan_in), size=conv.weight.shape) \
                    .astype(conv.weight.data.dtype)
        model.head.weight.data = rng.normal(0.0, math.sqrt(2.0 / model.head.fan_in), size=model.head.weight.shape) \
            .astype(model.head.weight.data.dtype)
        model.head.bias.data[:] = 0
        for pl in model.passport_layers():
            if pl.trainable_gamma is not None:
                pl.trainable_gamma.data[:] = 1
            if pl.trainable_beta is not None:
                pl.trainable_beta.data[:] = 0
            pl.running_mean[:] = 0
            pl.running_var[:] = 1
        return model
    if mode != FROM_PRETRAINED:
        raise ValueError(f"unknown init mode {mode!r}")
    if pretrained is None:
        raise ShapeError("from_pretrained initialization needs a checkpoint")
    if isinstance(pretrained, ProtectedModel):
        source = {k: t.data for k, t in pretrained.named_parameters().items()}
        model.load_buffers(pretrained.named_buffers())
    else:
        source = dict(pretrained)
    for name, t in params.items():
        if name not in source:
            if name.endswith((".gamma", ".beta")):
                continue
            raise ShapeError(f"checkpoint lacks parameter {name}")
        if tuple(source[name].shape) != t.shape:
            raise ShapeError(f"{name}: checkpoint shape {source[name].shape} differs from {t.shape}")
        t.data = np.array(source[name], dtype=t.data.dtype)
    return model


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        dt = self.params[0].data.dtype.type if self.params else np.float32
        lr, mom, wd = dt(self.lr), dt(self.momentum), dt(self.weight_decay)
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + wd * p.data if self.weight_decay else p.grad
            v *= mom
            v += g
            p.data -= lr * v


def task_loss(model: ProtectedModel, x: np.ndarray, y: np.ndarray, passport=None, training: bool = True) -> Tensor:
    return ops.cross_entropy(model.forward(Tensor(x), passport, training=training), y)


def _as_xy(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, Dataset):
        return data.test_x, data.test_y
    x, y = data
    return np.asarray(x), np.asarray(y)


def evaluate_accuracy(model: ProtectedModel, data, passport=None) -> float:
    """Percent of argmax-correct predictions (test split of a Dataset, or an ``(x, y)`` pair)."""
    x, y = _as_xy(data)
    if len(y) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    pred = model.predict(x, passport)
    return 100.0 * float(np.count_nonzero(pred == y)) / len(y)


@dataclass
class TelemetryRecord:
    epoch: int
    layer: int
    update_magnitude: float
    gamma: np.ndarray
    beta: np.ndarray
    train_acc: float | None = None
    test_acc: float | None = None


@dataclass
class TelemetryLog:
    records: list[TelemetryRecord] = field(default_factory=list)
    _previous: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def for_layer(self, layer: int) -> list[TelemetryRecord]:
        return [r for r in self.records if r.layer == layer]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "layer", "update_magnitude", "gamma_mean", "beta_mean", "test_acc"])
            for r in self.records:
                w.writerow([r.epoch, r.layer, repr(float(r.update_magnitude)), repr(float(r.gamma.mean())),
                            repr(float(r.beta.mean())), "" if r.test_acc is None else repr(float(r.test_acc))])


def record_telemetry(model: ProtectedModel, epoch: int, log: TelemetryLog, layers: Sequence[int] | None = None,
                     train_acc: float | None = None, test_acc: float | None = None) -> list[TelemetryRecord]:
    """Append one record per monitored layer: mean |weight change| since the last
    record (0 for the first), plus current scale and shift."""
    out = []
    entries = model.passport.entry_map() if model.passport is not None else {}
    for pl in model.passport_layers():
        if layers is not None and pl.layer_index not in layers:
            continue
        w = pl.conv.weight.data
        prev = log._previous.get(pl.layer_index)
        delta = 0.0 if prev is None else float(np.abs(w - prev).mean())
        log._previous[pl.layer_index] = w.copy()
        with no_grad():
            hp = derive_hidden_params(pl, entries.get(pl.layer_index))
        rec = TelemetryRecord(epoch, pl.layer_index, delta, hp.gamma.data.copy(), hp.beta.data.copy(),
                              train_acc, test_acc)
        log.records.append(rec)
        out.append(rec)
    return out


def fit(model: ProtectedModel, params: Sequence[Tensor], dataset: Dataset, config: TrainConfig,
        passport=None, log: TelemetryLog | None = None) -> list[float]:
    """Minimize the task loss over ``params`` only; returns the mean loss per epoch."""
    x_all, y_all = dataset.train_x, dataset.train_y
    if len(y_all) == 0:
        raise DataError("training set is empty")
    opt = SGD(params, config.lr, config.momentum, config.weight_decay)
    n = len(y_all)
    history = []
    # divergence surfaces as a NumericsError below rather than as overflow warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(config.epochs):
            opt.lr = config.lr_at(epoch)
            order = stream(config.seed, "shuffle", epoch).permutation(n)
            flips = stream(config.seed, "hflip", epoch).random(n) < 0.5 if config.hflip else None
            total, seen = 0.0, 0
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                xb = x_all[idx]
                if flips is not None:
                    xb = np.where(flips[idx][:, None, None, None], xb[..., ::-1], xb)
                opt.zero_grad()
                loss = task_loss(model, xb, y_all[idx], passport, training=True)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericsError(f"non-finite training loss at epoch {epoch}")
                backward(loss)
                opt.step()
                total += value * len(idx)
                seen += len(idx)
            history.append(total / seen)
            if log is not None:
                train_acc = evaluate_accuracy(model, (x_all, y_all), passport)
                test_acc = evaluate_accuracy(model, dataset, passport)
                record_telemetry(model, epoch + 1, log, config.monitored_layers, train_acc, test_acc)
    return history


@dataclass
class TrainResult:
    model: ProtectedModel
    telemetry: TelemetryLog | None
    loss_history: list[float]
    initial_loss: float
    final_loss: float
    train_accuracy: float
    test_accuracy: float


def train(model: ProtectedModel, dataset: Dataset, config: TrainConfig,
          pretrained: ProtectedModel | Mapping[str, np.ndarray] | None = None, initialize: bool = True) -> TrainResult:
    """Initialize (unless ``initialize`` is False) and train every public parameter of ``model``."""
    if len(dataset.train_y) == 0:
        raise DataError("training set is empty")
    trainable, _ = partition_parameters(model)
    if initialize:
        init_weights(model, config.init_mode, config.seed, pretrained)
    log = None
    if config.telemetry:
        log = TelemetryLog()
        # first epoch's update magnitude is measured from the initial weights
        for pl in model.passport_layers():
            log._previous[pl.layer_index] = pl.conv.weight.data.copy()
    with no_grad():
        init_loss = task_loss(model, dataset.train_x, dataset.train_y, training=False).item()
    history = fit(model, list(trainable.values()), dataset, config, None, log)
    with no_grad():
        final_loss = task_loss(model, dataset.train_x, dataset.train_y, training=False).item()
    return TrainResult(model, log, history, init_loss, final_loss,
                       evaluate_accuracy(model, (dataset.train_x, dataset.train_y)),
                       evaluate_accuracy(model, dataset))
