"""Passport generation: random patterns, fixed-image and random-image feature maps.

Feature-map passports are collected from a passport-free reference network of
the same architecture. For a variant that derives both scale and shift, the
shift passport at a layer comes from the image after the one chosen for the
scale passport (cyclically), so one choice per layer fixes both tensors and
the number of random-image combinations is ``N ** L``.
"""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field, replace
from typing import Iterator, Mapping, Sequence

import numpy as np

from .data import array_hash
from .errors import PassportError, RangeError
from .layers import PassportEntry, PassportKind
from .models import ProtectedModel
from .rng import stream
from .tensor import Tensor


class PassportType(str, enum.Enum):
    RANDOM_PATTERN = "random_pattern"
    FIXED_IMAGE = "fixed_image"
    RANDOM_IMAGE = "random_image"


@dataclass
class PassportSet:
    entries: list[PassportEntry]
    passport_type: PassportType
    seed: int
    total_layers: int
    source_image_ids: list[int] | None = None
    num_source_images: int | None = None
    layer_choices: list[int] | None = None
    reference_hash: str | None = None
    perturbation: dict | None = None

    def __post_init__(self):
        if not self.entries:
            raise PassportError("a passport set needs at least one entry")
        if not self.num_passport_layers < self.total_layers:
            raise PassportError(f"passport layers ({self.num_passport_layers}) must be fewer than "
                                f"total layers ({self.total_layers})")

    @property
    def num_passport_layers(self) -> int:
        return len(self.entries)

    def entry_map(self) -> dict[int, PassportEntry]:
        return {e.layer_index: e for e in self.entries}

    def tensors(self) -> Iterator[tuple[str, Tensor]]:
        for e in self.entries:
            for part in ("p_gamma", "p_beta"):
                t = getattr(e, part)
                if t is not None:
                    yield f"layer{e.layer_index}.{part}", t

    def fingerprint(self) -> str:
        return array_hash(*(t.data for _, t in self.tensors()))

    def metadata(self) -> dict:
        return {
            "passport_type": self.passport_type.value,
            "seed": int(self.seed),
            "total_layers": int(self.total_layers),
            "num_passport_layers": self.num_passport_layers,
            "layer_indices": [e.layer_index for e in self.entries],
            "source_image_ids": self.source_image_ids,
            "num_source_images": self.num_source_images,
            "layer_choices": self.layer_choices,
            "reference_hash": self.reference_hash,
            "perturbation": self.perturbation,
        }

    def equals(self, other: "PassportSet") -> bool:
        if self.metadata() != other.metadata():
            return False
        a, b = dict(self.tensors()), dict(other.tensors())
        return a.keys() == b.keys() and all(np.array_equal(a[k].data, b[k].data) for k in a)


def _shapes(model_or_shapes) -> dict[int, tuple[int, ...]]:
    if isinstance(model_or_shapes, ProtectedModel):
        return model_or_shapes.passport_shapes()
    return {int(k): tuple(v) for k, v in dict(model_or_shapes).items()}


def _total_layers(model_or_shapes, total_layers: int | None) -> int:
    if total_layers is not None:
        return total_layers
    if isinstance(model_or_shapes, ProtectedModel):
        return model_or_shapes.total_layers
    return 2 * len(_shapes(model_or_shapes)) + 1


def gen_random_pattern(model_shapes, seed: int, total_layers: int | None = None) -> PassportSet:
    """Passports with every element i.i.d. uniform on [-1, 1]."""
    shapes = _shapes(model_shapes)
    if not shapes:
        raise PassportError("model has no passporting layers")
    rng = stream(seed, "random-pattern")
    entries = []
    for idx in sorted(shapes):
        shape = shapes[idx]
        entries.append(PassportEntry(idx, Tensor(rng.uniform(-1.0, 1.0, size=shape)),
                                     Tensor(rng.uniform(-1.0, 1.0, size=shape))))
    return PassportSet(entries, PassportType.RANDOM_PATTERN, seed, _total_layers(model_shapes, total_layers))


def model_hash(model: ProtectedModel) -> str:
    params = model.named_parameters()
    bufs = model.named_buffers()
    return array_hash(*(params[k].data for k in params), *(bufs[k] for k in bufs))


def required_images(kind: PassportKind | None) -> int:
    return 2 if kind is PassportKind.V3 else 1


def collect_feature_maps(reference_model: ProtectedModel, images: Sequence[np.ndarray]) -> list[dict[int, np.ndarray]]:
    """Per image: the tensor arriving at every passporting layer of the reference network."""
    out = []
    for img in images:
        x = np.asarray(img, dtype=np.float32)
        if x.ndim == 3:
            x = x[None]
        out.append(reference_model.feature_maps(Tensor(x)))
    return out


def passport_from_choices(maps: Sequence[Mapping[int, np.ndarray]], choices: Sequence[int],
                          layer_indices: Sequence[int]) -> list[PassportEntry]:
    """Scale passport from image ``choices[l]``, shift passport from the next image (cyclic)."""
    n = len(maps)
    entries = []
    for idx, c in zip(layer_indices, choices):
        entries.append(PassportEntry(idx, Tensor(maps[c][idx]), Tensor(maps[(c + 1) % n][idx])))
    return entries


def draw_layer_choices(seed: int, n: int, num_layers: int) -> list[int]:
    """Independent uniform image index per layer."""
    return [int(c) for c in stream(seed, "random-image-choice").integers(0, n, size=num_layers)]


def gen_feature_map_passport(reference_model: ProtectedModel, images: Sequence[np.ndarray], mode: str,
                             seed: int = 0, kind: PassportKind | str | None = PassportKind.V3,
                             target: ProtectedModel | None = None,
                             image_ids: Sequence[int] | None = None) -> PassportSet:
    """Fixed-image (``mode="fixed"``) or random-image (``mode="random"``) passports.

    ``target`` (optional) is the network that will carry the passport; its
    passporting-layer shapes must match the reference network's.
    """
    kind = PassportKind(kind) if kind is not None else None
    shapes = reference_model.passport_shapes()
    if target is not None and target.passport_shapes() != shapes:
        raise PassportError("reference network architecture differs from the target network")
    n = len(images)
    need = required_images(kind)
    mode = mode.lower()
    if mode == "fixed":
        if n != need:
            raise PassportError(f"fixed-image passports for {kind} need exactly {need} image(s), got {n}")
    elif mode == "random":
        if n < need:
            raise PassportError(f"random-image passports for {kind} need N >= {need}, got {n}")
    else:
        raise PassportError(f"unknown feature-map passport mode {mode!r}")
    ids = list(image_ids) if image_ids is not None else list(range(n))
    if len(ids) != n:
        raise PassportError("one image id per source image is required")
    maps = collect_feature_maps(reference_model, images)
    layers = sorted(shapes)
    for m in maps:
        for idx in layers:
            if tuple(m[idx].shape) != shapes[idx]:
                raise PassportError(f"image feature map at layer {idx} has shape {m[idx].shape}")
    if mode == "fixed":
        choices = [0] * len(layers)
        ptype = PassportType.FIXED_IMAGE
    else:
        choices = draw_layer_choices(seed, n, len(layers))
        ptype = PassportType.RANDOM_IMAGE
    entries = passport_from_choices(maps, choices, layers)
    return PassportSet(entries, ptype, seed, reference_model.total_layers, source_image_ids=[int(i) for i in ids],
                       num_source_images=n, layer_choices=choices, reference_hash=model_hash(reference_model))


def guess_space_size(n: int, num_layers: int) -> int:
    """Number of random-image passport combinations, ``N ** L`` exactly."""
    if int(n) < 1 or int(num_layers) < 1:
        raise RangeError("N and L must be positive")
    return int(n) ** int(num_layers)


def enumerate_combinations(maps: Sequence[Mapping[int, np.ndarray]], layer_indices: Sequence[int]) -> Iterator[list[PassportEntry]]:
    """Every per-layer choice vector over the N source images."""
    for choices in itertools.product(range(len(maps)), repeat=len(layer_indices)):
        yield passport_from_choices(maps, choices, layer_indices)


def perturb_passport(base: PassportSet, c: float, noise_seed: int) -> PassportSet:
    """Add uniform [-1, 1] noise to ``round(c * size)`` randomly chosen elements of every tensor."""
    if not 0.0 <= c <= 1.0:
        raise RangeError(f"corruption fraction must lie in [0, 1], got {c}")
    entries = []
    for e in base.entries:
        parts = {}
        for part in ("p_gamma", "p_beta"):
            t = getattr(e, part)
            if t is None:
                parts[part] = None
                continue
            flat = t.data.reshape(-1).copy()
            k = int(np.floor(c * flat.size + 0.5))
            if k:
                rng = stream(noise_seed, "perturb", e.layer_index, part)
                idx = rng.choice(flat.size, size=k, replace=False)
                flat[idx] += rng.uniform(-1.0, 1.0, size=k).astype(flat.dtype)
            parts[part] = Tensor(flat.reshape(t.shape))
        entries.append(PassportEntry(e.layer_index, parts["p_gamma"], parts["p_beta"]))
    return replace(base, entries=entries, perturbation={"fraction": float(c), "noise_seed": int(noise_seed)})


def perturbed_count(size: int, c: float) -> int:
    return int(np.floor(c * size + 0.5))
