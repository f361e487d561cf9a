"""Desk-scale CNNs built from passport blocks.

``mininet``: two conv-passport-ReLU blocks, global average pooling, dense head.
``miniresnet``: stem block, residual block, strided transition block, residual
block, global average pooling, dense head.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import ops
from .errors import PassportError, ShapeError
from .layers import (ConvSpec, Dense, PassportBlock, PassportEntry, PassportKind, PassportLayer,
                     assemble_passport_block, parse_kind)
from .tensor import Tensor, no_grad

ARCHITECTURES = ("mininet", "miniresnet")


@dataclass(frozen=True)
class ArchSpec:
    name: str = "mininet"
    in_channels: int = 1
    image_size: int = 16
    widths: tuple[int, ...] = (16, 32)
    num_classes: int = 10
    kind: str | None = "V3"
    normalize_input: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArchSpec":
        d = dict(d)
        d["widths"] = tuple(d.get("widths", (16, 32)))
        return cls(**d)

    @property
    def passport_kind(self) -> PassportKind | None:
        return parse_kind(self.kind)


class ProtectedModel:
    """Layer graph whose passporting layers are bound to their convolutions.

    ``passport`` is the training-time secret (a :class:`~nnpassport.passports.PassportSet`
    or any object exposing ``entry_map()``); forward passes use it unless a
    running-time passport is given explicitly.
    """

    def __init__(self, arch: ArchSpec):
        if arch.name not in ARCHITECTURES:
            raise ShapeError(f"unknown architecture {arch.name!r}")
        if len(arch.widths) != 2:
            raise ShapeError("architectures take exactly two channel widths")
        self.arch = arch
        self.passport = None
        kind, norm = arch.passport_kind, arch.normalize_input
        w1, w2 = arch.widths
        if arch.name == "mininet":
            self.blocks = [
                assemble_passport_block([ConvSpec(arch.in_channels, w1)], kind, normalize_input=norm, first_index=0),
                assemble_passport_block([ConvSpec(w1, w2, kernel_size=4, stride=2, padding=1)], kind, normalize_input=norm, first_index=1),
            ]
        else:
            self.blocks = [
                assemble_passport_block([ConvSpec(arch.in_channels, w1)], kind, normalize_input=norm, first_index=0),
                assemble_passport_block([ConvSpec(w1, w1), ConvSpec(w1, w1)], kind, residual=True,
                                        normalize_input=norm, first_index=1),
                assemble_passport_block([ConvSpec(w1, w2, kernel_size=4, stride=2, padding=1)], kind, normalize_input=norm, first_index=3),
                assemble_passport_block([ConvSpec(w2, w2), ConvSpec(w2, w2)], kind, residual=True,
                                        normalize_input=norm, first_index=4),
            ]
        self.head = Dense(w2, arch.num_classes)
        self._set_passport_shapes()

    # structure -----------------------------------------------------------

    def passport_layers(self) -> list[PassportLayer]:
        return [pl for b in self.blocks for pl in b.passports]

    @property
    def num_passport_layers(self) -> int:
        return sum(1 for pl in self.passport_layers() if pl.kind is not None)

    @property
    def total_layers(self) -> int:
        """Convolution, passporting and dense layers counted together."""
        return 2 * len(self.passport_layers()) + 1

    @property
    def kind(self) -> PassportKind | None:
        kinds = {pl.kind for pl in self.passport_layers()}
        return kinds.pop() if len(kinds) == 1 else None

    def _set_passport_shapes(self) -> None:
        h = w = self.arch.image_size
        for block in self.blocks:
            for conv, pl in zip(block.convs, block.passports):
                pl.passport_shape = (1, conv.spec.in_channels, h, w)
                h, w = conv.output_hw(h, w)

    def passport_shapes(self) -> dict[int, tuple[int, ...]]:
        return {pl.layer_index: pl.passport_shape for pl in self.passport_layers()}

    def named_parameters(self) -> dict[str, Tensor]:
        """Every trainable (public) parameter, in a fixed order."""
        out: dict[str, Tensor] = {}
        for b_i, block in enumerate(self.blocks):
            for c_i, (conv, pl) in enumerate(zip(block.convs, block.passports)):
                out[f"block{b_i}.conv{c_i}.weight"] = conv.weight
                for name, t in pl.own_parameters().items():
                    out[f"block{b_i}.pass{c_i}.{name}"] = t
        out["head.weight"] = self.head.weight
        out["head.bias"] = self.head.bias
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for b_i, block in enumerate(self.blocks):
            for c_i, pl in enumerate(block.passports):
                if pl.normalize_input:
                    out[f"block{b_i}.pass{c_i}.running_mean"] = pl.running_mean
                    out[f"block{b_i}.pass{c_i}.running_var"] = pl.running_var
        return out

    def load_buffers(self, buffers: Mapping[str, np.ndarray]) -> None:
        for b_i, block in enumerate(self.blocks):
            for c_i, pl in enumerate(block.passports):
                key = f"block{b_i}.pass{c_i}"
                if f"{key}.running_mean" in buffers:
                    pl.running_mean = np.array(buffers[f"{key}.running_mean"], dtype=pl.running_mean.dtype)
                    pl.running_var = np.array(buffers[f"{key}.running_var"], dtype=pl.running_var.dtype)

    def set_kind(self, kind: PassportKind | None) -> None:
        for pl in self.passport_layers():
            pl.set_kind(kind)

    # passports -----------------------------------------------------------

    def bind(self, passport) -> "ProtectedModel":
        self.check_passport(passport)
        self.passport = passport
        return self

    def check_passport(self, passport) -> dict[int, PassportEntry]:
        entries = _entry_map(passport)
        for pl in self.passport_layers():
            if pl.kind is None:
                continue
            e = entries.get(pl.layer_index)
            if e is None:
                raise PassportError(f"passport has no entry for layer {pl.layer_index}")
            for part, needed in (("p_gamma", pl.derives_gamma), ("p_beta", pl.derives_beta)):
                t = getattr(e, part)
                if needed and t is None:
                    raise PassportError(f"layer {pl.layer_index} is missing {part}")
                if needed and tuple(t.shape) != pl.passport_shape:
                    raise PassportError(
                        f"layer {pl.layer_index} {part} has shape {t.shape}, expected {pl.passport_shape}")
        return entries

    # forward -------------------------------------------------------------

    def forward(self, x: Tensor, passport=None, training: bool = False) -> Tensor:
        entries = _entry_map(passport if passport is not None else self.passport)
        h = x
        for block in self.blocks:
            h = block.forward(h, entries, training)
        return self.head(ops.global_avg_pool(h))

    __call__ = forward

    def feature_maps(self, x: Tensor, passport=None) -> dict[int, np.ndarray]:
        """Inputs arriving at each convolution (evaluation mode), keyed by layer index."""
        entries = _entry_map(passport if passport is not None else self.passport)
        record: list[Tensor] = []
        h = x
        with no_grad():
            for block in self.blocks:
                h = block.forward(h, entries, False, record)
        return {pl.layer_index: t.data for pl, t in zip(self.passport_layers(), record)}

    def predict(self, images: np.ndarray, passport=None, batch_size: int = 500) -> np.ndarray:
        preds = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                logits = self.forward(Tensor(images[i:i + batch_size]), passport)
                preds.append(logits.data.argmax(axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def _entry_map(passport) -> dict[int, PassportEntry]:
    if passport is None:
        return {}
    if isinstance(passport, Mapping):
        return dict(passport)
    if hasattr(passport, "entry_map"):
        return passport.entry_map()
    if isinstance(passport, Iterable):
        return {e.layer_index: e for e in passport}
    raise PassportError(f"cannot use {type(passport).__name__} as a passport")


def build_model(arch: ArchSpec | Mapping | None = None, **overrides) -> ProtectedModel:
    if arch is None:
        arch = ArchSpec(**overrides)
    elif isinstance(arch, Mapping):
        arch = ArchSpec.from_dict({**arch, **overrides})
    elif overrides:
        arch = ArchSpec.from_dict({**arch.to_dict(), **overrides})
    return ProtectedModel(arch)


def clone_model(model: ProtectedModel) -> ProtectedModel:
    """Deep copy of parameters, buffers, variant and bound passport reference."""
    twin = ProtectedModel(model.arch)
    for pl_src, pl_dst in zip(model.passport_layers(), twin.passport_layers()):
        pl_dst.set_kind(pl_src.kind)
    src, dst = model.named_parameters(), twin.named_parameters()
    for name, t in src.items():
        dst[name].data = t.data.copy()
    twin.load_buffers(model.named_buffers())
    twin.passport = model.passport
    return twin
