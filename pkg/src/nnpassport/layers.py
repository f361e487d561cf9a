"""Passporting layers: per-channel scale/shift whose values come from a passport.

A passporting layer sits after a convolution. Its scale ``gamma`` and shift
``beta`` are either ordinary trainable vectors or are computed from the
preceding convolution's weights and a secret passport tensor::

    gamma = mean_{h,w} conv2d(p_gamma, W)      (one value per output channel)

Which of the two is derived depends on :class:`PassportKind`:

====  ===============  ===============
kind  gamma            beta
====  ===============  ===============
V1    derived          trainable
V2    trainable        derived
V3    derived          derived
====  ===============  ===============

``kind=None`` is the passport-free layer (both trainable, i.e. batch norm);
it also represents a network whose hidden values were exposed as free
variables, e.g. after a reverse-engineering attack.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import ops
from .errors import PassportError, ShapeError
from .tensor import Tensor


class PassportKind(str, enum.Enum):
    V1 = "V1"
    V2 = "V2"
    V3 = "V3"

    @property
    def derives_gamma(self) -> bool:
        return self in (PassportKind.V1, PassportKind.V3)

    @property
    def derives_beta(self) -> bool:
        return self in (PassportKind.V2, PassportKind.V3)


def parse_kind(value) -> PassportKind | None:
    if value is None or value == "none":
        return None
    return PassportKind(value)


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: int = 1


class Conv2d:
    """Bias-free convolution; its weight is a public parameter."""

    def __init__(self, spec: ConvSpec):
        self.spec = spec
        k = spec.kernel_size
        self.weight = Tensor(np.zeros((spec.out_channels, spec.in_channels, k, k)), requires_grad=True)

    @property
    def stride(self) -> int:
        return self.spec.stride

    @property
    def padding(self) -> int:
        return self.spec.padding

    @property
    def fan_in(self) -> int:
        return self.spec.in_channels * self.spec.kernel_size ** 2

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.spec.stride, self.spec.padding)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.spec.kernel_size, self.spec.stride, self.spec.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


class Dense:
    def __init__(self, in_features: int, out_features: int):
        self.weight = Tensor(np.zeros((out_features, in_features)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    @property
    def fan_in(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return ops.dense_affine(x, self.weight, self.bias)


@dataclass
class PassportEntry:
    """The passport tensors for one passporting layer."""
    layer_index: int
    p_gamma: Tensor | None
    p_beta: Tensor | None


@dataclass
class HiddenParams:
    gamma: Tensor
    beta: Tensor


def passport_function(conv_weight: Tensor, passport: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Channel-wise average of ``conv2d(passport, conv_weight)``, shape [Cout]."""
    if passport.ndim != 4 or passport.shape[0] != 1:
        raise ShapeError(f"passport must have shape [1,Cin,H,W], got {passport.shape}")
    pooled = ops.global_avg_pool(ops.conv2d(passport, conv_weight, stride, padding))
    return ops.reshape(pooled, (conv_weight.shape[0],))


@dataclass(eq=False)
class PassportLayer:
    conv: Conv2d
    kind: PassportKind | None
    layer_index: int
    normalize_input: bool = True
    momentum: float = 0.9
    eps: float = 1e-5
    passport_shape: tuple[int, ...] | None = None
    trainable_gamma: Tensor | None = None
    trainable_beta: Tensor | None = None
    running_mean: np.ndarray = field(init=False)
    running_var: np.ndarray = field(init=False)

    def __post_init__(self):
        c = self.channels
        self.running_mean = np.zeros(c, dtype=self.conv.weight.data.dtype)
        self.running_var = np.ones(c, dtype=self.conv.weight.data.dtype)
        self.set_kind(self.kind)

    @property
    def channels(self) -> int:
        return self.conv.spec.out_channels

    @property
    def derives_gamma(self) -> bool:
        return self.kind is not None and self.kind.derives_gamma

    @property
    def derives_beta(self) -> bool:
        return self.kind is not None and self.kind.derives_beta

    def set_kind(self, kind: PassportKind | None) -> None:
        """Switch variant, creating or deleting the trainable vectors it dictates.

        Existing trainable vectors that remain trainable are kept.
        """
        self.kind = kind
        c = self.channels
        if self.derives_gamma:
            self.trainable_gamma = None
        elif self.trainable_gamma is None:
            self.trainable_gamma = Tensor(np.ones(c), requires_grad=True)
        if self.derives_beta:
            self.trainable_beta = None
        elif self.trainable_beta is None:
            self.trainable_beta = Tensor(np.zeros(c), requires_grad=True)

    def own_parameters(self) -> dict[str, Tensor]:
        out = {}
        if self.trainable_gamma is not None:
            out["gamma"] = self.trainable_gamma
        if self.trainable_beta is not None:
            out["beta"] = self.trainable_beta
        return out


def derive_hidden_params(layer: PassportLayer, entry: PassportEntry | None) -> HiddenParams:
    """Compute the layer's scale and shift for the running-time passport ``entry``."""
    w, s, p = layer.conv.weight, layer.conv.stride, layer.conv.padding
    if layer.derives_gamma:
        if entry is None or entry.p_gamma is None:
            raise PassportError(f"layer {layer.layer_index} needs a gamma passport")
        gamma = passport_function(w, entry.p_gamma, s, p)
    else:
        gamma = layer.trainable_gamma
    if layer.derives_beta:
        if entry is None or entry.p_beta is None:
            raise PassportError(f"layer {layer.layer_index} needs a beta passport")
        beta = passport_function(w, entry.p_beta, s, p)
    else:
        beta = layer.trainable_beta
    return HiddenParams(gamma, beta)


def passport_layer_forward(layer: PassportLayer, x_p: Tensor, entry: PassportEntry | None,
                           training: bool = False, hidden: HiddenParams | None = None) -> Tensor:
    if x_p.ndim != 4 or x_p.shape[1] != layer.channels:
        raise ShapeError(f"passport layer {layer.layer_index} expects {layer.channels} channels, got {x_p.shape}")
    if hidden is None:
        hidden = derive_hidden_params(layer, entry)
    x = x_p
    if layer.normalize_input:
        if training:
            x, mean, var = ops.batch_standardize(x_p, layer.eps)
            m = x_p.size // layer.channels
            unbiased = var * (m / max(m - 1, 1))
            mom = layer.running_mean.dtype.type(layer.momentum)
            layer.running_mean = mom * layer.running_mean + (1 - mom) * mean.astype(layer.running_mean.dtype)
            layer.running_var = mom * layer.running_var + (1 - mom) * unbiased.astype(layer.running_var.dtype)
        else:
            inv = 1.0 / np.sqrt(layer.running_var + layer.running_var.dtype.type(layer.eps))
            x = ops.channel_affine(x_p, Tensor(inv), Tensor(-layer.running_mean * inv))
    return ops.channel_affine(x, hidden.gamma, hidden.beta)


class PassportBlock:
    """conv -> passport (-> ReLU) chains, optionally wrapped in a skip connection.

    The residual form holds exactly two convolutions: the ReLU after the second
    passporting layer is applied after adding the block input.
    """

    def __init__(self, conv_specs: list[ConvSpec], kind: PassportKind | None, activation: bool = True,
                 residual: bool = False, normalize_input: bool = True, first_index: int = 0):
        if residual:
            if len(conv_specs) != 2:
                raise ShapeError("a residual block holds exactly two convolutions")
            a, b = conv_specs
            if a.in_channels != b.out_channels or a.stride != 1 or b.stride != 1:
                raise ShapeError("residual block needs stride 1 and matched channels")
        self.residual = residual
        self.activation = activation
        self.convs = [Conv2d(cs) for cs in conv_specs]
        self.passports = [PassportLayer(c, kind, first_index + i, normalize_input)
                          for i, c in enumerate(self.convs)]

    def forward(self, x: Tensor, passports: Mapping[int, PassportEntry], training: bool = False,
                record: list | None = None) -> Tensor:
        h = x
        last = len(self.convs) - 1
        for i, (conv, pl) in enumerate(zip(self.convs, self.passports)):
            if record is not None:
                record.append(h)
            h = passport_layer_forward(pl, conv(h), passports.get(pl.layer_index), training)
            if self.residual and i == last:
                h = ops.add(h, x)
            if self.activation:
                h = ops.relu(h)
        return h


def assemble_passport_block(conv_specs: list[ConvSpec], kind: PassportKind | None, activation: bool = True,
                            residual: bool = False, normalize_input: bool = True,
                            first_index: int = 0) -> PassportBlock:
    """Build a conv -> passport (-> ReLU) fragment; each passporting layer is bound
    to the convolution right before it."""
    return PassportBlock(conv_specs, kind, activation, residual, normalize_input, first_index)
