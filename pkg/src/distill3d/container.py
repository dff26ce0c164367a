"""Versioned binary checkpoint container.

Layout: magic "D3DF", u32 format version, u8 precision flag, u32 header
length, JSON header (kind, metadata, parameter names/shapes/lr multipliers
in store order), then raw little-endian parameter data concatenated in the
same order. A sidecar manifest (<path>.manifest.json) lists names, shapes
and sha256 checksums for human inspection.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gradcore import ParamStore

MAGIC = b"D3DF"
FORMAT_VERSION = 1

_PRECISION = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_PRECISION_FLAG = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class ContainerError(Exception):
    pass


@dataclass
class Container:
    kind: str
    meta: dict
    store: ParamStore
    precision: np.dtype


def save_container(path, store: ParamStore, kind: str, meta: dict) -> None:
    path = Path(path)
    dtypes = {np.dtype(store[n].dtype) for n in store.names()}
    if len(dtypes) > 1:
        raise ContainerError(f"mixed parameter precisions {dtypes}")
    dtype = dtypes.pop() if dtypes else np.dtype(np.float32)
    if dtype not in _PRECISION_FLAG:
        raise ContainerError(f"unsupported precision {dtype}")
    header = {
        "kind": kind,
        "meta": meta,
        "params": [
            {"name": n, "shape": list(store[n].shape), "lr_mult": store.lr_mult(n)}
            for n in store.names()
        ],
    }
    blob = json.dumps(header).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    wire = dtype.newbyteorder("<")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint32(FORMAT_VERSION).tobytes())
        f.write(np.uint8(_PRECISION_FLAG[dtype]).tobytes())
        f.write(np.uint32(len(blob)).tobytes())
        f.write(blob)
        for name in store.names():
            f.write(np.ascontiguousarray(store[name], dtype=wire).tobytes())
    manifest = {
        "container": path.name,
        "kind": kind,
        "format_version": FORMAT_VERSION,
        "precision": str(dtype),
        "params": [
            {
                "name": n,
                "shape": list(store[n].shape),
                "sha256": hashlib.sha256(
                    np.ascontiguousarray(store[n], dtype=wire).tobytes()).hexdigest(),
            }
            for n in store.names()
        ],
    }
    Path(str(path) + ".manifest.json").write_text(json.dumps(manifest, indent=2))


def load_container(path) -> Container:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic {raw[:4]!r}")
    version = int(np.frombuffer(raw[4:8], "<u4")[0])
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported format version {version}")
    flag = int(raw[8])
    if flag not in _PRECISION:
        raise ContainerError(f"{path}: unknown precision flag {flag}")
    dtype = _PRECISION[flag]
    hlen = int(np.frombuffer(raw[9:13], "<u4")[0])
    header = json.loads(raw[13:13 + hlen].decode())
    store = ParamStore()
    offset = 13 + hlen
    for spec in header["params"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype=dtype, count=n, offset=offset).reshape(shape)
        offset += n * dtype.itemsize
        store.add(spec["name"], arr.astype(dtype.newbyteorder("=")),
                  spec.get("lr_mult", 1.0))
    return Container(kind=header["kind"], meta=header["meta"], store=store,
                     precision=np.dtype(dtype.newbyteorder("=")))
