"""Tensor container: a text manifest followed by raw little-endian data.

Layout::

    DACONTAINER 1
    meta {"architecture": ..., "seed": 0}
    tensor conv1.weight float32 16,3,3,3 0 1728
    ...
    end
    <raw bytes, concatenated in manifest order>

Offsets are relative to the first byte after the ``end`` line.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .errors import IncompatibleSnapshotError
from .nn import Model

MAGIC = "DACONTAINER 1"
_DTYPES = {"float32", "float64", "int64", "int32", "uint8"}


def save_tensors(path, tensors: Dict[str, np.ndarray], meta: dict) -> None:
    lines = [MAGIC, "meta " + json.dumps(meta, sort_keys=True)]
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        if any(ch.isspace() for ch in name):
            raise ValueError(f"tensor name {name!r} contains whitespace")
        arr = np.asarray(arr)
        if arr.dtype.name not in _DTYPES:
            raise ValueError(f"unsupported dtype {arr.dtype} for {name}")
        raw = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"tensor {name} {arr.dtype.name} {shape} {offset} {len(raw)}")
        blobs.append(raw)
        offset += len(raw)
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for raw in blobs:
            fh.write(raw)


def load_tensors(path) -> Tuple[Dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    pos = 0
    meta = None
    entries = []

    def next_line():
        nonlocal pos
        end = data.index(b"\n", pos)
        line = data[pos:end].decode("utf-8")
        pos = end + 1
        return line

    if next_line() != MAGIC:
        raise ValueError(f"{path}: not a tensor container")
    while True:
        line = next_line()
        if line == "end":
            break
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            meta = json.loads(rest)
        elif kind == "tensor":
            name, dtype, shape, off, length = rest.split(" ")
            dims = tuple(int(d) for d in shape.split(",")) if shape else ()
            entries.append((name, dtype, dims, int(off), int(length)))
        else:
            raise ValueError(f"{path}: bad manifest line {line!r}")
    base = pos
    tensors = {}
    for name, dtype, dims, off, length in entries:
        dt = np.dtype(dtype).newbyteorder("<")
        arr = np.frombuffer(data, dtype=dt, count=length // dt.itemsize, offset=base + off)
        tensors[name] = arr.reshape(dims).astype(np.dtype(dtype), copy=True)
    return tensors, meta or {}


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    tensors = {**{f"param:{k}": v for k, v in model.params.items()},
               **{f"buffer:{k}": v for k, v in model.buffers.items()}}
    meta = {"architecture": model.architecture(), "seed": model.seed}
    if extra:
        meta["extra"] = extra
    save_tensors(path, tensors, meta)


def load_checkpoint(path) -> Model:
    tensors, meta = load_tensors(path)
    if "architecture" not in meta:
        raise IncompatibleSnapshotError(f"{path}: no architecture descriptor")
    model = Model.from_architecture(meta["architecture"], seed=meta.get("seed", 0))
    for key, arr in tensors.items():
        kind, _, name = key.partition(":")
        target = model.params if kind == "param" else model.buffers
        if name not in target or target[name].shape != arr.shape:
            raise IncompatibleSnapshotError(f"{path}: tensor {name} does not fit the architecture")
        target[name] = arr
    return model


def checkpoint_extra(path) -> dict:
    return load_tensors(path)[1].get("extra", {})
