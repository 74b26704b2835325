"""Versioned binary checkpoints.

Layout: magic "VPL1", u32 little-endian header length, canonical JSON
header (sorted keys, no whitespace), then a little-endian float32 payload.
Values train in float64 but are stored f32; f32 -> f64 -> f32 is lossless,
so load(save(x)) and save(load(file)) are both byte-exact.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .backbone import Backbone, BackboneConfig
from .tensor import Parameter, Tensor

MAGIC = b"VPL1"


class CheckpointError(ValueError):
    """Malformed or mismatched checkpoint file."""


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_container(path, header, named_arrays):
    """`named_arrays` is an ordered list of (name, float array)."""
    entries = []
    payload = bytearray()
    for name, arr in named_arrays:
        arr32 = np.ascontiguousarray(arr, dtype=np.float64).astype("<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
        payload += arr32.tobytes()
    header = dict(header)
    header["params"] = entries
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(len(blob).to_bytes(4, "little"))
        f.write(blob)
        f.write(bytes(payload))
    os.replace(tmp, path)


def read_container(path):
    """Returns (header dict, ordered {name: float64 array})."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, want {MAGIC!r}")
        (hlen,) = (int.from_bytes(f.read(4), "little"),)
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    arrays = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        raw = payload[start:start + 4 * count]
        if len(raw) != 4 * count:
            raise CheckpointError(f"{path}: truncated payload for {entry['name']}")
        arrays[entry["name"]] = (
            np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
        )
    return header, arrays


def save_backbone(bb, path):
    header = {
        "kind": "backbone",
        "format_version": 1,
        "config": bb.config.to_dict(),
        "domain_tag": bb.domain_tag,
    }
    named = [(name, p.value.data) for name, p in bb.params.items()]
    write_container(path, header, named)


def load_backbone(path):
    header, arrays = read_container(path)
    if header.get("kind") != "backbone":
        raise CheckpointError(f"{path}: kind={header.get('kind')!r}, want 'backbone'")
    config = BackboneConfig(**header["config"])
    params = {name: Parameter(name, Tensor(arr)) for name, arr in arrays.items()}
    return Backbone(config, params, domain_tag=header.get("domain_tag", "general"))
