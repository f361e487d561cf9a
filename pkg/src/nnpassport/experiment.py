"""End-to-end pipeline: dataset, reference network, passport, protected network, evidence."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .attacks import AttackConfig, AttackReport, fake_passport_attack, reverse_engineer_hidden
from .data import Dataset, load_dataset, read_ppm, resize_nearest
from .errors import ConfigError
from .models import ArchSpec, ProtectedModel, build_model
from .passports import PassportSet, gen_feature_map_passport, gen_random_pattern, model_hash, required_images
from .persistence import read_container
from .rng import stream
from .training import TrainConfig, TrainResult, evaluate_accuracy, train
from .verify import SignatureCurve, VerdictThresholds, signature_curve


def dataset_from_config(config: Mapping) -> Dataset:
    return load_dataset(config["dataset"])


def arch_from_config(config: Mapping, dataset: Dataset | None = None, kind: str | None = "keep") -> ArchSpec:
    a = dict(config["architecture"])
    if dataset is not None:
        a["num_classes"] = dataset.num_classes
        a["in_channels"] = dataset.image_shape[0]
        a["image_size"] = dataset.image_shape[1]
    if kind != "keep":
        a["kind"] = kind
    if a.get("kind") == "none":
        a["kind"] = None
    return ArchSpec.from_dict(a)


def train_config_from(config: Mapping, seed: int | None = None) -> TrainConfig:
    t = dict(config["train"])
    return TrainConfig(seed=config["seed"] if seed is None else seed, **t)


def thresholds_from(config: Mapping) -> VerdictThresholds:
    return VerdictThresholds(**config["thresholds"])


def owner_image_ids(config: Mapping, dataset: Dataset, count: int) -> list[int]:
    ids = config["passport"].get("image_ids")
    if ids is not None:
        if len(ids) < count:
            raise ConfigError(f"passport.image_ids lists {len(ids)} images, {count} needed")
        return [int(i) for i in ids[:count]]
    rng = stream(config["seed"], "passport-images")
    return [int(i) for i in rng.choice(len(dataset.train_y), size=count, replace=False)]


def train_reference(config: Mapping, dataset: Dataset) -> TrainResult:
    """Passport-free twin: same architecture and recipe, plain scale/shift."""
    model = build_model(arch_from_config(config, dataset, kind=None))
    cfg = train_config_from(config)
    cfg.telemetry = False
    return train(model, dataset, cfg)


def make_passport(config: Mapping, model: ProtectedModel, dataset: Dataset,
                  reference: ProtectedModel | None) -> PassportSet:
    p = config["passport"]
    seed = int(config["seed"]) * 1000003 + int(p.get("seed", 0))
    if p["type"] == "random_pattern":
        return gen_random_pattern(model, seed)
    if reference is None:
        raise ConfigError("image passports need a reference network")
    if p["type"] == "fixed_image":
        count = required_images(model.kind)
        mode = "fixed"
    else:
        count = int(p["num_images"])
        mode = "random"
    files = p.get("image_files")
    if files:
        images = load_source_images(files, dataset.image_shape)
        if len(images) < count:
            raise ConfigError(f"passport.image_files provides {len(images)} images, {count} needed")
        images = images[:count]
        ids = None
    else:
        ids = owner_image_ids(config, dataset, count)
        images = [dataset.train_x[i] for i in ids]
    return gen_feature_map_passport(reference, images, mode, seed, model.kind, target=model, image_ids=ids)


def load_source_images(paths, shape) -> list:
    """User-supplied passport images: PPM/PGM files or NNPP containers of [C,H,W]
    tensors, resized (nearest neighbour) to the network input shape."""
    out = []
    for path in paths:
        if str(path).lower().endswith((".ppm", ".pgm", ".pnm")):
            arrays = [read_ppm(path)]
        else:
            arrays = [a for name, a in sorted(read_container(path).items()) if not isinstance(a, bytes)]
        out.extend(resize_nearest(a, shape) for a in arrays)
    return out


@dataclass
class ProtectionRun:
    config: dict
    dataset: Dataset
    model: ProtectedModel
    passport: PassportSet
    result: TrainResult | None
    reference: ProtectedModel | None = None
    baseline_accuracy: float | None = None
    curve: SignatureCurve | None = None
    reports: dict[str, AttackReport] = field(default_factory=dict)
    recorded_accuracy: float | None = None

    @property
    def valid_accuracy(self) -> float:
        if self.recorded_accuracy is not None:
            return self.recorded_accuracy
        if self.result is not None:
            return self.result.test_accuracy
        return evaluate_accuracy(self.model, self.dataset)

    def evidence(self) -> dict:
        """Everything recorded at protection time that verification later needs."""
        return {
            "kind": self.model.kind.value if self.model.kind else None,
            "M_p": self.valid_accuracy,
            "test_hash": self.dataset.test_hash,
            "dataset": self.dataset.spec,
            "passport_fingerprint": self.passport.fingerprint(),
            "checkpoint_hash": model_hash(self.model),
            "thresholds": self.config["thresholds"],
            "signature_curve": self.curve.to_dict() if self.curve else None,
        }


def protect(config: Mapping, dataset: Dataset | None = None, baseline: bool = False,
            reference: TrainResult | None = None, curve: bool = True) -> ProtectionRun:
    """Train a passport-protected network per ``config`` (and optionally its passport-free twin)."""
    config = dict(config)
    dataset = dataset if dataset is not None else dataset_from_config(config)
    arch = arch_from_config(config, dataset)
    needs_reference = config["passport"]["type"] != "random_pattern"
    if reference is None and (baseline or needs_reference):
        reference = train_reference(config, dataset)
    model = build_model(arch)
    if model.kind is None:
        raise ConfigError("architecture.kind must name a passport variant (V1, V2 or V3)")
    passport = make_passport(config, model, dataset, reference.model if reference else None)
    model.bind(passport)
    result = train(model, dataset, train_config_from(config))
    run = ProtectionRun(config, dataset, model, passport, result,
                        reference.model if reference else None,
                        reference.test_accuracy if (reference and baseline) else None)
    if curve:
        sig = config["signature"]
        run.curve = signature_curve(model, passport, dataset, sig["grid"], sig["seeds_per_point"],
                                    seed=config["seed"])
    return run


def attack_config(entry: Mapping, run: ProtectionRun, trials: int | None = None,
                  budget_epochs: int | None = None) -> AttackConfig:
    kind = entry["kind"]
    cfg = AttackConfig(kind, num_trials=trials or entry.get("trials", 100),
                       seed=entry.get("seed", run.config["seed"]),
                       budget_epochs=budget_epochs if budget_epochs is not None else entry.get("budget_epochs", 5),
                       lr=entry.get("lr", 0.05))
    ds, passport = run.dataset, run.passport
    src = passport.source_image_ids or []
    if kind == "T2":
        classes = set(int(ds.train_y[i]) for i in src) if src else set(range(ds.num_classes))
        pool_ids = [i for i in range(len(ds.test_y)) if int(ds.test_y[i]) in classes]
        cfg.t2_pool = ds.test_x[pool_ids]
        cfg.t2_pool_ids = pool_ids
    elif kind == "T3":
        files = run.config["passport"].get("image_files")
        if files:
            cfg.t3_images = np.stack(load_source_images(files, ds.image_shape)[:passport.num_source_images])
        elif src:
            cfg.t3_images = ds.train_x[src]
        else:
            raise ConfigError("T3 attacks need an image-based passport with known source images")
    return cfg


def run_attack(run: ProtectionRun, entry: Mapping, trials: int | None = None,
               budget_epochs: int | None = None) -> AttackReport:
    cfg = attack_config(entry, run, trials, budget_epochs)
    if cfg.attack_kind == "RevEng":
        _, report = reverse_engineer_hidden(run.model, run.dataset, cfg)
    else:
        report = fake_passport_attack(run.model, run.dataset, cfg, run.reference)
    run.reports[cfg.attack_kind] = report
    return report
