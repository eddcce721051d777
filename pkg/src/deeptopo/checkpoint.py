"""Checkpoint directories: a text manifest plus one little-endian float32 blob.

``manifest.txt`` layout::

    deeptopo-checkpoint 1
    [config]
    key = value
    ...
    [tensors]
    name<TAB>shape<TAB>offset<TAB>length<TAB>crc32
    ...

``offset`` and ``length`` are in bytes into ``params.bin``; ``shape`` is
comma separated (empty for scalars). Everything is validated before any
array of the receiving model is touched.
"""
from __future__ import annotations

import os
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .config import ConfigError, dump_config, parse_config_text
from .nn import Module

MAGIC = "deeptopo-checkpoint"
VERSION = 1
MANIFEST = "manifest.txt"
BLOB = "params.bin"
BLOB_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Entry:
    name: str
    shape: tuple[int, ...]
    offset: int
    length: int
    crc32: int


def _shape_str(shape) -> str:
    return ",".join(str(s) for s in shape)


def _parse_shape(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",")) if s else ()


def encode(state: list[tuple[str, np.ndarray]], config: dict[str, Any]) -> tuple[bytes, bytes]:
    """Serialise ``(name, array)`` pairs; returns ``(manifest bytes, blob bytes)``."""
    chunks, entries, offset = [], [], 0
    for name, arr in state:
        if "\t" in name or "\n" in name:
            raise CheckpointError(f"invalid tensor name {name!r}")
        raw = np.ascontiguousarray(arr, dtype=BLOB_DTYPE).tobytes()
        entries.append(Entry(name, tuple(arr.shape), offset, len(raw), zlib.crc32(raw)))
        chunks.append(raw)
        offset += len(raw)
    lines = [f"{MAGIC} {VERSION}", "[config]"]
    lines += dump_config(config).splitlines()
    lines.append("[tensors]")
    lines += [f"{e.name}\t{_shape_str(e.shape)}\t{e.offset}\t{e.length}\t{e.crc32:08x}" for e in entries]
    return ("\n".join(lines) + "\n").encode("utf-8"), b"".join(chunks)


def parse_manifest(text: str) -> tuple[dict[str, Any], list[Entry]]:
    lines = text.splitlines()
    if not lines or lines[0].split(" ")[0] != MAGIC:
        raise CheckpointError("not a checkpoint manifest")
    try:
        version = int(lines[0].split(" ")[1])
    except (IndexError, ValueError):
        raise CheckpointError("malformed manifest header") from None
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        i_cfg, i_t = lines.index("[config]"), lines.index("[tensors]")
    except ValueError:
        raise CheckpointError("manifest is missing a section") from None
    try:
        config = parse_config_text("\n".join(lines[i_cfg + 1:i_t]), MANIFEST)
    except ConfigError as e:
        raise CheckpointError(str(e)) from None
    entries = []
    for ln in lines[i_t + 1:]:
        parts = ln.split("\t")
        if len(parts) != 5:
            raise CheckpointError(f"malformed inventory line {ln!r}")
        try:
            entries.append(Entry(parts[0], _parse_shape(parts[1]), int(parts[2]), int(parts[3]), int(parts[4], 16)))
        except ValueError:
            raise CheckpointError(f"malformed inventory line {ln!r}") from None
    return config, entries


def decode(manifest: bytes, blob: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    try:
        text = manifest.decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError("manifest is not UTF-8") from None
    config, entries = parse_manifest(text)
    arrays, expect = {}, 0
    for e in entries:
        n = int(np.prod(e.shape, dtype=np.int64)) * BLOB_DTYPE.itemsize
        if e.offset != expect or e.length != n:
            raise CheckpointError(f"inventory entry {e.name}: inconsistent offset/length")
        raw = blob[e.offset:e.offset + e.length]
        if len(raw) != e.length:
            raise CheckpointError(f"blob truncated at {e.name}")
        if zlib.crc32(raw) != e.crc32:
            raise CheckpointError(f"checksum mismatch for {e.name}")
        if e.name in arrays:
            raise CheckpointError(f"duplicate tensor {e.name}")
        arrays[e.name] = np.frombuffer(raw, dtype=BLOB_DTYPE).reshape(e.shape)
        expect += e.length
    if expect != len(blob):
        raise CheckpointError(f"blob has {len(blob) - expect} trailing bytes")
    return config, arrays


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save(directory, model: Module, config: dict[str, Any]) -> Path:
    d = Path(directory)
    manifest, blob = encode(model.state(), config)
    d.mkdir(parents=True, exist_ok=True)
    _atomic_write(d / BLOB, blob)
    _atomic_write(d / MANIFEST, manifest)
    return d


def read(directory) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    d = Path(directory)
    try:
        manifest = (d / MANIFEST).read_bytes()
        blob = (d / BLOB).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {d}: {e.strerror}") from None
    return decode(manifest, blob)


def load_into(model: Module, arrays: dict[str, np.ndarray]) -> None:
    """Copy ``arrays`` into ``model``; refuses (untouched) on any inventory mismatch."""
    dtypes = {n: a.dtype for n, a in model.state()}
    try:
        model.load_state({n: a.astype(dtypes.get(n, a.dtype)) for n, a in arrays.items()})
    except ValueError as e:
        raise CheckpointError(str(e)) from None


def check_config(saved: dict[str, Any], expected: dict[str, Any], keys: Optional[list[str]] = None) -> None:
    keys = list(expected) if keys is None else keys
    diffs = [k for k in keys if saved.get(k) != expected.get(k)]
    if diffs:
        k = diffs[0]
        raise CheckpointError(f"checkpoint config mismatch: {k} = {saved.get(k)!r}, expected {expected.get(k)!r}"
                              + (f" (+{len(diffs) - 1} more)" if len(diffs) > 1 else ""))
