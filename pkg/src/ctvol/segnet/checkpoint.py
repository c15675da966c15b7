"""Checkpoint files: a JSON manifest plus a little-endian float64 blob.

``model.json`` holds the model config, training step, seed, and for each
parameter its name, offset (in float64 elements) and shape. The companion
``model.bin`` is the concatenation of all parameters in manifest order,
each flattened in C order.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from math import prod
from pathlib import Path

import numpy as np

from .layers import SegNetError
from .model import DeepLabV3Plus, ModelConfig

FORMAT = "ctvol-checkpoint-1"


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    step: int = 0
    seed: int = 0

    def model(self) -> DeepLabV3Plus:
        return DeepLabV3Plus(self.config).load(self.params)


def blob_path(manifest_path) -> Path:
    return Path(manifest_path).with_suffix(".bin")


def pack(params: dict):
    manifest = []
    chunks = []
    offset = 0
    for name, arr in params.items():
        manifest.append({"name": name, "offset": offset, "shape": list(arr.shape)})
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").ravel())
        offset += arr.size
    flat = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    return manifest, flat


def unpack(manifest: list, flat: np.ndarray) -> dict:
    expected = 0
    params = {}
    for entry in manifest:
        if entry["offset"] != expected:
            raise SegNetError(f"manifest gap or overlap at {entry['name']}")
        size = prod(entry["shape"])
        params[entry["name"]] = flat[expected:expected + size].reshape(entry["shape"]).astype(np.float64)
        expected += size
    if expected != flat.size:
        raise SegNetError(f"manifest covers {expected} values, blob has {flat.size}")
    return params


def save_checkpoint(path, model: DeepLabV3Plus, step: int, seed: int) -> None:
    path = Path(path)
    manifest, flat = pack(model.parameters())
    blob = flat.astype("<f8").tobytes()
    doc = {
        "format": FORMAT,
        "config": model.cfg.to_dict(),
        "step": int(step),
        "seed": int(seed),
        "dtype": "<f8",
        "blob": blob_path(path).name,
        "size": int(flat.size),
        "sha256": hashlib.sha256(blob).hexdigest(),
        "parameters": manifest,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    bpath = blob_path(path)
    tmp_b = bpath.with_name(bpath.name + ".tmp")
    tmp_b.write_bytes(blob)
    os.replace(tmp_b, bpath)
    tmp_m = path.with_name(path.name + ".tmp")
    tmp_m.write_text(json.dumps(doc, indent=1, sort_keys=True))
    os.replace(tmp_m, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("format") != FORMAT:
        raise SegNetError(f"{path}: not a {FORMAT} manifest")
    blob = (path.parent / doc["blob"]).read_bytes()
    if hashlib.sha256(blob).hexdigest() != doc["sha256"]:
        raise SegNetError(f"{path}: parameter blob checksum mismatch")
    flat = np.frombuffer(blob, dtype="<f8")
    params = unpack(doc["parameters"], flat)
    return Checkpoint(ModelConfig.from_dict(doc["config"]), params, doc["step"], doc["seed"])
