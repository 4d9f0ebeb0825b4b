"""Binary checkpoint files.

Layout::

    b"ATGAN" + version byte        6 bytes
    header length                  8 bytes, little-endian unsigned
    header                         UTF-8 JSON
    payload                        float32 little-endian, tensors in manifest order

The header carries the format version, a config echo, the vocabulary, any
extra JSON state, and a manifest of ``{name, shape, offset, nbytes}`` entries
whose byte ranges tile the payload exactly.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import AdamState, ParamStore, RMSpropState, Tensor

MAGIC = b"ATGAN"
VERSION = 1
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: dict = field(default_factory=dict)   # name -> float32 ndarray
    config: dict = field(default_factory=dict)
    vocab: list = field(default_factory=list)
    state: dict = field(default_factory=dict)     # JSON-serialisable extras
    version: int = VERSION


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically (temp file + rename)."""
    manifest, chunks, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        a = np.array(arr, dtype=_DTYPE, order="C")  # ascontiguousarray would promote 0-d to 1-d
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({
        "version": ckpt.version,
        "config": ckpt.config,
        "vocab": list(ckpt.vocab),
        "state": ckpt.state,
        "dtype": "float32-le",
        "manifest": manifest,
    }, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + str(ckpt.version).encode("ascii"))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)


def load_checkpoint(path, expected_shapes: dict | None = None) -> Checkpoint:
    """Read and validate a checkpoint. ``expected_shapes`` (name -> shape)
    additionally pins tensor shapes, e.g. against a model config."""
    blob = Path(path).read_bytes()
    if len(blob) < 14 or blob[:5] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:6]!r}, expected {MAGIC + b'1'!r}")
    version = blob[5:6]
    if version != str(VERSION).encode("ascii"):
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {version!r}, this build reads {VERSION}")
    (hlen,) = struct.unpack("<Q", blob[6:14])
    if 14 + hlen > len(blob):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[14:14 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    if header.get("version") != VERSION:
        raise CheckpointVersionError(f"{path}: header version {header.get('version')!r} != {VERSION}")
    payload = memoryview(blob)[14 + hlen:]
    tensors, offset = {}, 0
    for entry in header["manifest"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if entry["offset"] != offset:
            raise CheckpointError(f"{path}: tensor {name!r} offset {entry['offset']} leaves a gap or overlap at {offset}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if nbytes != entry["nbytes"]:
            raise CheckpointShapeError(f"{path}: tensor {name!r} shape {shape} disagrees with its byte size {entry['nbytes']}")
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated payload in tensor {name!r}")
        if expected_shapes is not None and name in expected_shapes and tuple(expected_shapes[name]) != shape:
            raise CheckpointShapeError(f"{path}: tensor {name!r} has shape {shape}, expected {tuple(expected_shapes[name])}")
        tensors[name] = np.frombuffer(payload[offset:offset + nbytes], dtype=_DTYPE).reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing payload bytes not in the manifest")
    return Checkpoint(tensors, header["config"], header["vocab"], header["state"], header["version"])


# ---------------------------------------------------------------- packing helpers


def put_params(ckpt: Checkpoint, prefix: str, store) -> None:
    for name, p in store.params.items():
        ckpt.tensors[f"{prefix}/{name}"] = p.data
    for name, b in store.buffers.items():
        ckpt.tensors[f"{prefix}.buffer/{name}"] = b


def has_params(ckpt: Checkpoint, prefix: str) -> bool:
    return any(k.startswith(prefix + "/") for k in ckpt.tensors)


def get_params(ckpt: Checkpoint, prefix: str):
    if not has_params(ckpt, prefix):
        raise CheckpointError(f"checkpoint holds no {prefix!r} parameters")
    params, buffers = {}, {}
    for key, arr in ckpt.tensors.items():
        head, _, name = key.partition("/")
        if head == prefix:
            params[name] = Tensor(arr, requires_grad=True, name=name)
        elif head == prefix + ".buffer":
            buffers[name] = arr.copy()
    return ParamStore(params, buffers)


def put_adam(ckpt: Checkpoint, prefix: str, state, names) -> None:
    ckpt.state[prefix] = {"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2,
                          "eps": state.eps, "step": state.step, "names": list(names) if state.m else []}
    for name, m, v in zip(names, state.m, state.v):
        ckpt.tensors[f"{prefix}.m/{name}"] = m
        ckpt.tensors[f"{prefix}.v/{name}"] = v


def get_adam(ckpt: Checkpoint, prefix: str):
    meta = ckpt.state[prefix]
    return AdamState(lr=meta["lr"], beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"], step=meta["step"],
                     m=[ckpt.tensors[f"{prefix}.m/{n}"].copy() for n in meta["names"]],
                     v=[ckpt.tensors[f"{prefix}.v/{n}"].copy() for n in meta["names"]])


def put_rmsprop(ckpt: Checkpoint, prefix: str, state, names) -> None:
    ckpt.state[prefix] = {"lr": state.lr, "rho": state.rho, "eps": state.eps,
                          "names": list(names) if state.sq else []}
    for name, sq in zip(names, state.sq):
        ckpt.tensors[f"{prefix}.sq/{name}"] = sq


def get_rmsprop(ckpt: Checkpoint, prefix: str):
    meta = ckpt.state[prefix]
    return RMSpropState(lr=meta["lr"], rho=meta["rho"], eps=meta["eps"],
                        sq=[ckpt.tensors[f"{prefix}.sq/{n}"].copy() for n in meta["names"]])
