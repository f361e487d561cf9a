"""Fake-passport attacks (T1/T2/T3) and the reverse-engineering attack on hidden parameters."""
from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset
from .errors import AttackError
from .models import ProtectedModel, clone_model
from .passports import (PassportSet, PassportType, collect_feature_maps, gen_feature_map_passport, gen_random_pattern,
                        guess_space_size, passport_from_choices, required_images)
from .rng import stream
from .training import TrainConfig, evaluate_accuracy, fit

FAKE_KINDS = ("T1", "T2", "T3")
REVENG = "RevEng"


@dataclass
class AttackConfig:
    attack_kind: str = "T1"
    num_trials: int = 100
    seed: int = 0
    budget_epochs: int = 5
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    weight_decay: float = 0.0
    t2_pool: np.ndarray | None = None
    t2_pool_ids: list[int] | None = None
    t3_images: np.ndarray | None = None
    workers: int | None = None

    def __post_init__(self):
        if self.attack_kind not in FAKE_KINDS + (REVENG,):
            raise AttackError(f"unknown attack kind {self.attack_kind!r}")
        if self.num_trials < 1:
            raise AttackError("num_trials must be >= 1")
        if self.attack_kind == REVENG and self.budget_epochs < 0:
            raise AttackError("budget_epochs must be >= 0")


@dataclass
class AttackReport:
    attack_kind: str
    accuracies: list[float]
    valid_accuracy: float
    wall_time: float = 0.0
    details: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))

    @property
    def strengths(self) -> list[float]:
        return [self.valid_accuracy - a for a in self.accuracies]

    @property
    def strength(self) -> float:
        return float(np.mean(self.strengths))

    def summary(self) -> dict:
        return {"attack_kind": self.attack_kind, "num_trials": len(self.accuracies), "mean": self.mean,
                "std": self.std, "A_p": self.valid_accuracy, "S": self.strength, "wall_time": self.wall_time,
                **self.details}

    def write(self, csv_path: str | Path, json_path: str | Path | None = None) -> None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trial_id", "accuracy"])
            for i, a in enumerate(self.accuracies):
                w.writerow([i, repr(float(a))])
        if json_path is not None:
            Path(json_path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True))


def _workers(config: AttackConfig) -> int:
    if config.workers:
        return config.workers
    return max(1, int(os.environ.get("NNPP_THREADS", "1")))


def fake_passports(model: ProtectedModel, config: AttackConfig,
                   reference_model: ProtectedModel | None = None) -> list[PassportSet]:
    """The per-trial fake passports an attack of ``config.attack_kind`` would present."""
    kind = config.attack_kind
    n_trials = config.num_trials
    if kind == "T1":
        return [gen_random_pattern(model, int(stream(config.seed, "T1", t).integers(2 ** 63)))
                for t in range(n_trials)]
    if reference_model is None:
        raise AttackError(f"{kind} needs a reference network to extract feature maps")
    if kind == "T2":
        pool = config.t2_pool
        need = required_images(model.kind)
        if pool is None or len(pool) < need:
            raise AttackError(f"T2 needs an attacker image pool of at least {need} images")
        ids = config.t2_pool_ids or list(range(len(pool)))
        out = []
        for t in range(n_trials):
            pick = stream(config.seed, "T2", t).choice(len(pool), size=need, replace=False)
            out.append(gen_feature_map_passport(reference_model, [pool[i] for i in pick], "fixed", t, model.kind,
                                                image_ids=[ids[i] for i in pick]))
        return out
    if kind == "T3":
        images = config.t3_images
        if images is None or len(images) < 1:
            raise AttackError("T3 needs the known image set")
        n = len(images)
        layers = sorted(model.passport_shapes())
        if guess_space_size(n, len(layers)) == 1:
            raise AttackError("only the true passport combination exists; no fake passport is possible")
        truth = getattr(model.passport, "layer_choices", None)
        maps = collect_feature_maps(reference_model, images)
        out = []
        for t in range(n_trials):
            rng = stream(config.seed, "T3", t)
            while True:
                choices = [int(c) for c in rng.integers(0, n, size=len(layers))]
                if truth is None or choices != list(truth):
                    break
            entries = passport_from_choices(maps, choices, layers)
            out.append(PassportSet(entries, PassportType.RANDOM_IMAGE, t, model.total_layers,
                                   num_source_images=n, layer_choices=choices))
        return out
    raise AttackError(f"{kind} is not a fake-passport attack")


def fake_passport_attack(model: ProtectedModel, dataset: Dataset, config: AttackConfig,
                         reference_model: ProtectedModel | None = None) -> AttackReport:
    """Evaluate the protected network under ``num_trials`` fake passports."""
    if config.attack_kind not in FAKE_KINDS:
        raise AttackError(f"{config.attack_kind} is not a fake-passport attack")
    start = time.perf_counter()
    valid = evaluate_accuracy(model, dataset)
    fakes = fake_passports(model, config, reference_model)
    with ThreadPoolExecutor(_workers(config)) as pool:
        accs = list(pool.map(lambda p: evaluate_accuracy(model, dataset, p), fakes))
    details = {}
    if config.attack_kind == "T3":
        details["rejected_true_combination"] = True
    return AttackReport(config.attack_kind, accs, valid, time.perf_counter() - start, details)


def strip_hidden(model: ProtectedModel) -> tuple[ProtectedModel, list]:
    """Clone the public parameters and replace every derived scale/shift by a free
    vector (scale 1, shift 0). Returns the clone and the new free tensors."""
    twin = clone_model(model)
    twin.passport = None
    free = []
    for pl in twin.passport_layers():
        had_gamma, had_beta = pl.trainable_gamma is not None, pl.trainable_beta is not None
        pl.set_kind(None)
        if not had_gamma:
            free.append(pl.trainable_gamma)
        if not had_beta:
            free.append(pl.trainable_beta)
    return twin, free


def reverse_engineer_hidden(model: ProtectedModel, dataset: Dataset,
                            config: AttackConfig) -> tuple[ProtectedModel, AttackReport]:
    """Recover hidden scale/shift values by training them with the public weights frozen.

    The attacker also re-estimates the normalization statistics (training-mode
    forward passes update them).
    """
    start = time.perf_counter()
    valid = evaluate_accuracy(model, dataset)
    recovered, free = strip_hidden(model)
    cfg = TrainConfig(epochs=config.budget_epochs, batch_size=config.batch_size, lr=config.lr,
                      momentum=config.momentum, weight_decay=config.weight_decay, schedule="cosine",
                      seed=config.seed)
    history = fit(recovered, free, dataset, cfg) if free and config.budget_epochs else []
    acc = evaluate_accuracy(recovered, dataset)
    report = AttackReport(REVENG, [acc], valid, time.perf_counter() - start,
                          {"budget_epochs": config.budget_epochs, "loss_history": history})
    return recovered, report
