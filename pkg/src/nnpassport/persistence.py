"""Binary tensor containers for checkpoints and passports.

Layout (all integers unsigned 32-bit little-endian)::

    b"NNPP" | version | entry count
    per entry: name length | UTF-8 name | dtype code | rank | extents... | payload

dtype 0 is float32 little-endian; dtype 1 is raw bytes, used for the JSON
``__meta__`` entry. Checkpoints store public parameters and normalization
statistics only: derived scale/shift values are recomputed from a passport.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError, PassportError
from .layers import PassportEntry, parse_kind
from .models import ArchSpec, ProtectedModel
from .passports import PassportSet, PassportType
from .tensor import Tensor

MAGIC = b"NNPP"
VERSION = 1
DTYPE_F32 = 0
DTYPE_BYTES = 1
META = "__meta__"


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_container(entries: Mapping[str, np.ndarray | bytes]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, value in entries.items():
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw_name)) + raw_name)
        if isinstance(value, (bytes, bytearray)):
            out.append(struct.pack("<III", DTYPE_BYTES, 1, len(value)))
            out.append(bytes(value))
        else:
            a = np.asarray(value, dtype="<f4")  # ascontiguousarray would promote rank 0 to 1
            out.append(struct.pack(f"<II{a.ndim}I", DTYPE_F32, a.ndim, *a.shape))
            out.append(a.tobytes())
    return b"".join(out)


def decode_container(raw: bytes) -> dict[str, np.ndarray | bytes]:
    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError("truncated container")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4) != MAGIC:
        raise FormatError("bad magic; not an NNPP container")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    entries: dict[str, np.ndarray | bytes] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("entry name is not UTF-8") from exc
        if name in entries:
            raise FormatError(f"duplicate entry name {name!r}")
        dtype, rank = struct.unpack("<II", take(8))
        extents = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(extents, dtype=np.int64)) if rank else 1
        if dtype == DTYPE_F32:
            entries[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(extents).astype(np.float32)
        elif dtype == DTYPE_BYTES:
            if rank != 1:
                raise FormatError("byte entries must have rank 1")
            entries[name] = take(n)
        else:
            raise FormatError(f"unknown dtype code {dtype}")
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes after the last entry")
    return entries


def write_container(path: str | Path, entries: Mapping[str, np.ndarray | bytes]) -> None:
    atomic_write(path, encode_container(entries))


def read_container(path: str | Path) -> dict[str, np.ndarray | bytes]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return decode_container(raw)


def _meta_bytes(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _read_meta(entries: Mapping, expected: str) -> dict:
    raw = entries.get(META)
    if not isinstance(raw, bytes):
        raise FormatError("container has no metadata entry")
    try:
        meta = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("metadata entry is not valid JSON") from exc
    if meta.get("format") != expected:
        raise FormatError(f"expected a {expected} container, found {meta.get('format')!r}")
    return meta


# checkpoints --------------------------------------------------------------

def checkpoint_entries(model: ProtectedModel) -> dict[str, np.ndarray | bytes]:
    meta = {"format": "checkpoint", "arch": model.arch.to_dict(),
            "layer_kinds": [pl.kind.value if pl.kind else None for pl in model.passport_layers()]}
    entries: dict[str, np.ndarray | bytes] = {META: _meta_bytes(meta)}
    for name, t in model.named_parameters().items():
        entries[name] = t.data
    for name, a in model.named_buffers().items():
        entries[name] = a
    return entries


def save_checkpoint(model: ProtectedModel, path: str | Path) -> None:
    write_container(path, checkpoint_entries(model))


def load_checkpoint(path: str | Path) -> ProtectedModel:
    entries = read_container(path)
    meta = _read_meta(entries, "checkpoint")
    try:
        model = ProtectedModel(ArchSpec.from_dict(meta["arch"]))
        kinds = meta["layer_kinds"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed checkpoint metadata: {exc}") from exc
    layers = model.passport_layers()
    if len(kinds) != len(layers):
        raise FormatError("checkpoint layer count does not match its architecture")
    for pl, k in zip(layers, kinds):
        pl.set_kind(parse_kind(k))
    params = model.named_parameters()
    expected = set(params) | set(model.named_buffers()) | {META}
    if set(entries) != expected:
        raise FormatError(f"checkpoint entries differ from the architecture: "
                          f"missing {sorted(expected - set(entries))}, extra {sorted(set(entries) - expected)}")
    for name, t in params.items():
        if entries[name].shape != t.shape:
            raise FormatError(f"{name}: stored shape {entries[name].shape} differs from {t.shape}")
        t.data = entries[name].copy()
    model.load_buffers({k: v for k, v in entries.items() if k != META and k not in params})
    return model


# passports ----------------------------------------------------------------

def save_passport(passport: PassportSet, path: str | Path) -> None:
    meta = {"format": "passport", **passport.metadata()}
    entries: dict[str, np.ndarray | bytes] = {META: _meta_bytes(meta)}
    for name, t in passport.tensors():
        entries[name] = t.data
    write_container(path, entries)


def load_passport(path: str | Path) -> PassportSet:
    entries = read_container(path)
    meta = _read_meta(entries, "passport")
    indices = meta.get("layer_indices") or []
    if len(indices) != meta.get("num_passport_layers"):
        raise FormatError("passport metadata layer count mismatch")
    tensor_names = {k for k in entries if k != META}
    recs = []
    for idx in indices:
        parts = {}
        for part in ("p_gamma", "p_beta"):
            key = f"layer{idx}.{part}"
            parts[part] = Tensor(entries[key]) if key in entries else None
            tensor_names.discard(key)
        if parts["p_gamma"] is None and parts["p_beta"] is None:
            raise FormatError(f"passport has no tensors for layer {idx}")
        recs.append(PassportEntry(idx, parts["p_gamma"], parts["p_beta"]))
    if tensor_names:
        raise FormatError(f"passport entries not described by metadata: {sorted(tensor_names)}")
    try:
        return PassportSet(recs, PassportType(meta["passport_type"]), meta["seed"], meta["total_layers"],
                           source_image_ids=meta.get("source_image_ids"),
                           num_source_images=meta.get("num_source_images"),
                           layer_choices=meta.get("layer_choices"), reference_hash=meta.get("reference_hash"),
                           perturbation=meta.get("perturbation"))
    except (KeyError, ValueError, PassportError) as exc:
        raise FormatError(f"malformed passport metadata: {exc}") from exc
