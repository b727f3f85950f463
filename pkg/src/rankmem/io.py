"""Checkpoint and artifact serialization.

One container format for all artifacts: a magic tag, a little-endian
uint64 header length, a JSON header (version, metadata, named shape
table), then the concatenated float64 row-major payloads in header order.
Byte output is deterministic for identical inputs (sorted JSON keys, no
timestamps), so rerun artifacts compare equal.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from rankmem.model import Backbone, Model, ModelConfig
from rankmem.router import AtomBank

MAGIC = b"RKMEMCK1"
VERSION = 1


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    names = list(arrays)
    header = {
        "version": VERSION,
        "meta": meta or {},
        "arrays": [{"name": n, "shape": list(np.asarray(arrays[n]).shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in names:
            arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
            fh.write(arr.tobytes(order="C"))


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a rankmem checkpoint")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header["version"] != VERSION:
            raise ValueError(f"unsupported checkpoint version {header['version']}")
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 8), dtype="<f8", count=count)
            arrays[entry["name"]] = data.reshape(shape).copy()
    return arrays, header["meta"]


def save_bank(path, bank: AtomBank) -> None:
    save_arrays(path, {"atoms": bank.atoms, "keys": bank.keys},
                meta={"kind": "atom-bank", **bank.meta})


def load_bank(path) -> AtomBank:
    arrays, meta = load_arrays(path)
    meta = dict(meta)
    if meta.pop("kind", None) != "atom-bank":
        raise ValueError("checkpoint does not hold an atom bank")
    return AtomBank(arrays["atoms"], arrays["keys"], meta=meta)


def save_checkpoint(path, model: Model) -> None:
    """Model + adapter + bank checkpoint: config, backbone, adapter store."""
    arrays = {}
    for name in model.backbone.store.names:
        arrays[f"backbone/{name}"] = model.backbone.store[name]
    for name in model.store.names:
        arrays[f"adapter/{name}"] = model.store[name]
    meta = {"kind": "model", "config": model.cfg.__dict__.copy(), "seed": model.seed,
            "backbone_frozen": model.backbone.frozen}
    save_arrays(path, arrays, meta=meta)


def load_checkpoint(path) -> Model:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "model":
        raise ValueError("checkpoint does not hold a model")
    cfg = ModelConfig(**meta["config"])
    model = Model(cfg, int(meta["seed"]))
    for name in model.backbone.store.names:
        model.backbone.store[name][...] = arrays[f"backbone/{name}"]
    for name in model.store.names:
        model.store[name][...] = arrays[f"adapter/{name}"]
    if meta.get("backbone_frozen"):
        model.backbone.freeze()
    return model
