"""Labeled image datasets: the synthetic oriented-bar task and IDX file pairs."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DataError, FormatError
from .rng import stream

IDX_UBYTE_RANK1 = 0x00000801
IDX_UBYTE_RANK3 = 0x00000803

SYNTHETIC_DEFAULTS = {
    "kind": "synthetic",
    "num_classes": 10,
    "samples_per_class": 200,
    "image_size": 16,
    "seed": 7,
    "test_fraction": 0.25,
    "noise": 0.25,
}


def array_hash(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(struct.pack("<I", a.ndim))
        h.update(struct.pack(f"<{a.ndim}I", *a.shape))
        h.update(a.tobytes())
    return h.hexdigest()


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    num_classes: int
    spec: dict = field(default_factory=dict)

    @property
    def split_hash(self) -> str:
        return array_hash(self.train_x, self.train_y, self.test_x, self.test_y)

    @property
    def test_hash(self) -> str:
        return array_hash(self.test_x, self.test_y)

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self.train_x.shape[1:])

    @property
    def chance(self) -> float:
        return 100.0 / self.num_classes


def _render_bars(rng: np.random.Generator, size: int, angle: float, bars: int, noise: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    cx, cy = c + rng.uniform(-2, 2), c + rng.uniform(-2, 2)
    theta = angle + rng.normal(0, 0.06)
    across = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    half = rng.uniform(0.6, 1.1)
    spacing = 4.0
    img = np.zeros((size, size))
    for b in range(bars):
        off = (b - (bars - 1) / 2.0) * spacing
        img = np.maximum(img, np.clip(half + 0.5 - np.abs(across - off), 0.0, 1.0))
    contrast = rng.uniform(0.7, 1.0)
    background = rng.uniform(0.1, 0.3)
    img = background + contrast * img + rng.normal(0, noise, size=img.shape)
    return img


def synthetic_dataset(num_classes: int = 10, samples_per_class: int = 200, image_size: int = 16,
                      seed: int = 7, test_fraction: float = 0.25, noise: float = 0.25) -> Dataset:
    """K-class oriented-bar images, one channel.

    Class ``k`` is an orientation (``k mod 5`` of five, 36 degrees apart) and a
    number of parallel bars (``k // 5 + 1``). Position, width, contrast and
    pixel noise are random.
    """
    if num_classes < 1 or samples_per_class < 1 or image_size < 4:
        raise DataError("synthetic dataset needs >=1 class, >=1 sample per class and size >= 4")
    if not 0.0 < test_fraction < 1.0:
        raise DataError("test_fraction must lie strictly between 0 and 1")
    orient = min(num_classes, 5)
    rng = stream(seed, "synthetic-images")
    xs, ys = [], []
    for k in range(num_classes):
        angle = np.pi * (k % orient) / orient
        bars = k // orient + 1
        for _ in range(samples_per_class):
            xs.append(_render_bars(rng, image_size, angle, bars, noise))
            ys.append(k)
    x = np.asarray(xs, dtype=np.float32)[:, None, :, :]
    y = np.asarray(ys, dtype=np.int64)
    order = stream(seed, "synthetic-split").permutation(len(y))
    x, y = x[order], y[order]
    n_test = max(1, int(round(test_fraction * len(y))))
    spec = {"kind": "synthetic", "num_classes": num_classes, "samples_per_class": samples_per_class,
            "image_size": image_size, "seed": seed, "test_fraction": test_fraction, "noise": noise}
    return Dataset(x[n_test:], y[n_test:], x[:n_test], y[:n_test], num_classes, spec)


# IDX ---------------------------------------------------------------------

def read_idx(path: str | Path) -> np.ndarray:
    """Parse an unsigned-byte IDX file (rank 1 labels or rank 3 images)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic >> 8 != 0x08 or magic & 0xFF not in (1, 3):
        raise FormatError(f"{path}: unsupported IDX magic {magic:#010x}")
    rank = magic & 0xFF
    header = 4 + 4 * rank
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{rank}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise FormatError(f"{path}: payload has {len(raw) - header} bytes, header promises {count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    a = np.asarray(array)
    if a.ndim not in (1, 3):
        raise FormatError("IDX writer supports rank 1 or rank 3 arrays")
    a = np.clip(a, 0, 255).astype(np.uint8)
    magic = IDX_UBYTE_RANK1 if a.ndim == 1 else IDX_UBYTE_RANK3
    Path(path).write_bytes(struct.pack(">I", magic) + struct.pack(f">{a.ndim}I", *a.shape) + a.tobytes())


def _idx_pair(images: str | Path, labels: str | Path) -> tuple[np.ndarray, np.ndarray]:
    x = read_idx(images)
    y = read_idx(labels)
    if x.ndim != 3 or y.ndim != 1 or len(x) != len(y):
        raise FormatError(f"{images}/{labels}: expected rank-3 images and matching rank-1 labels")
    return (x.astype(np.float32) / 255.0)[:, None, :, :], y.astype(np.int64)


def idx_dataset(images: str, labels: str, test_images: str | None = None, test_labels: str | None = None,
                test_fraction: float = 0.25, seed: int = 0, num_classes: int | None = None) -> Dataset:
    x, y = _idx_pair(images, labels)
    spec = {"kind": "idx", "images": str(images), "labels": str(labels), "seed": seed}
    if test_images is not None:
        tx, ty = _idx_pair(test_images, test_labels)
        spec.update(test_images=str(test_images), test_labels=str(test_labels))
    else:
        order = stream(seed, "idx-split").permutation(len(y))
        x, y = x[order], y[order]
        n_test = max(1, int(round(test_fraction * len(y))))
        x, y, tx, ty = x[n_test:], y[n_test:], x[:n_test], y[:n_test]
        spec["test_fraction"] = test_fraction
    k = num_classes or int(max(y.max(initial=0), ty.max(initial=0)) + 1)
    spec["num_classes"] = k
    return Dataset(x, y, tx, ty, k, spec)


def load_dataset(spec: Mapping | None = None) -> Dataset:
    """Build a dataset from a spec naming the synthetic generator or IDX files."""
    spec = dict(spec or {})
    kind = spec.pop("kind", "synthetic")
    if kind == "synthetic":
        params = {k: v for k, v in SYNTHETIC_DEFAULTS.items() if k != "kind"}
        unknown = set(spec) - set(params)
        if unknown:
            raise DataError(f"unknown synthetic dataset keys: {sorted(unknown)}")
        params.update(spec)
        return synthetic_dataset(**params)
    if kind == "idx":
        return idx_dataset(**spec)
    raise DataError(f"unknown dataset kind {kind!r}")


def read_ppm(path: str | Path) -> np.ndarray:
    """Binary PPM/PGM (P6/P5, maxval <= 255) as float32 [C,H,W] in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval > 255:
        raise FormatError(f"{path}: only 8-bit binary P5/P6 images are supported")
    channels = 3 if magic == b"P6" else 1
    pix = np.frombuffer(raw, dtype=np.uint8, offset=pos + 1)
    if pix.size != w * h * channels:
        raise FormatError(f"{path}: pixel payload size mismatch")
    img = pix.reshape(h, w, channels).transpose(2, 0, 1).astype(np.float32) / maxval
    return img


def resize_nearest(image: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    """Nearest-neighbour resize of [C,H,W] to ``shape``; channels are averaged or repeated to match."""
    c, h, w = shape
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[None]
    if img.shape[0] != c:
        img = np.repeat(img.mean(axis=0, keepdims=True), c, axis=0)
    rows = (np.arange(h) * img.shape[1] // h)
    cols = (np.arange(w) * img.shape[2] // w)
    return np.ascontiguousarray(img[:, rows][:, :, cols])
