"""Versioned binary containers for model checkpoints and activation exports.

Both formats share the same layout: an ASCII magic string, a length-prefixed
JSON header, and a sequence of named float64 little-endian arrays with shape
headers. Round-trips are bitwise exact.
"""
from __future__ import annotations

import json
import struct
from typing import Iterable

import numpy as np

from .network import AblationFlags, LayerSpec, PartitionedNetwork, build_partitioned

CHECKPOINT_MAGIC = b"LOCALGRAD1"
ACTIVATIONS_MAGIC = b"LOCALACT1"


class CheckpointError(ValueError):
    """Raised for missing, truncated, or malformed container files."""


def _write_container(path, magic: bytes, header: dict,
                     entries: Iterable[tuple[str, np.ndarray]]) -> None:
    entries = list(entries)
    with open(path, "wb") as fh:
        fh.write(magic)
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            arr = np.ascontiguousarray(arr, dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _read_exact(fh, n: int, path, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"{path}: truncated while reading {what}")
    return buf


def _read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror}") from exc
    with fh:
        got = fh.read(len(magic))
        if got != magic:
            raise CheckpointError(
                f"{path}: bad magic {got!r}, expected {magic.decode()!r}")
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4, path, "header length"))
        try:
            header = json.loads(_read_exact(fh, hlen, path, "header"))
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: corrupt header ({exc.msg})") from exc
        (count,) = struct.unpack("<I", _read_exact(fh, 4, path, "entry count"))
        entries: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, path, "entry name"))
            name = _read_exact(fh, nlen, path, "entry name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, path, "entry rank"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, path, "entry shape"))
            size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            raw = _read_exact(fh, 8 * size, path, f"data of {name}")
            entries[name] = np.frombuffer(raw, dtype="<f8").astype(
                np.float64).reshape(shape)
        return header, entries


def _spec_to_dict(spec: LayerSpec) -> dict:
    return {"kind": spec.kind, "dims": list(spec.dims), "init": spec.init,
            "padding": spec.padding}


def _spec_from_dict(d: dict) -> LayerSpec:
    return LayerSpec(kind=d["kind"], dims=tuple(d["dims"]), init=d["init"],
                     padding=d["padding"])


def _checkpoint_entries(net: PartitionedNetwork) -> list[tuple[str, np.ndarray]]:
    entries = [(p.id, p.value.data) for p in net.main_parameters()]
    entries += [(p.id, p.value.data) for p in net.aux_parameters()]
    for a in net.adapters:
        entries.append((f"adapter{a.block_index}.ema.w", a.ema_w))
        entries.append((f"adapter{a.block_index}.ema.b", a.ema_b))
    return entries


def save_checkpoint(net: PartitionedNetwork, path) -> None:
    header = {
        "format": 1,
        "specs": [_spec_to_dict(s) for s in net.specs],
        "input_shape": list(net.input_shape),
        "n_classes": net.n_classes,
        "k": net.K,
        "flags": vars(net.flags),
        "momentum": net.momentum,
        "seed": net.seed,
    }
    _write_container(path, CHECKPOINT_MAGIC, header, _checkpoint_entries(net))


def load_checkpoint(path) -> PartitionedNetwork:
    header, entries = _read_container(path, CHECKPOINT_MAGIC)
    specs = [_spec_from_dict(d) for d in header["specs"]]
    net = build_partitioned(
        specs, header["k"], n_classes=header["n_classes"],
        input_shape=tuple(header["input_shape"]),
        flags=AblationFlags(**header["flags"]),
        momentum=header["momentum"], seed=header["seed"])
    expected = dict(_checkpoint_entries(net))
    if set(expected) != set(entries):
        missing = sorted(set(expected) - set(entries))
        extra = sorted(set(entries) - set(expected))
        raise CheckpointError(
            f"{path}: parameter set mismatch (missing {missing}, unexpected {extra})")
    for name, arr in expected.items():
        stored = entries[name]
        if stored.shape != arr.shape:
            raise CheckpointError(
                f"{path}: {name} has shape {stored.shape}, expected {arr.shape}")
        arr[...] = stored
    return net


def save_activations(path, matrices: dict[str, np.ndarray], meta: dict | None = None) -> None:
    header = {"format": 1, "meta": meta or {}}
    _write_container(path, ACTIVATIONS_MAGIC, header,
                     sorted(matrices.items()))


def load_activations(path) -> tuple[dict, dict[str, np.ndarray]]:
    header, entries = _read_container(path, ACTIVATIONS_MAGIC)
    return header.get("meta", {}), entries
