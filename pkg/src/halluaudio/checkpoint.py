"""Versioned binary checkpoints.

Layout: ``b"HALUCKPT"``, u32 version, u32 header length, a UTF-8 JSON header
(sorted keys) describing every tensor, then the tensors as little-endian
float32 buffers in header order. No timestamps, so identical models give
identical files.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

from .backbone import BackboneSpec
from .fewshot import ConceptMask, ExtractorBank, MaskSet

MAGIC = b"HALUCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def model_digest(spec: BackboneSpec, masks: MaskSet, input_fingerprint: str = "") -> str:
    """Identifies the architecture and input features a checkpoint expects."""
    blob = json.dumps({"backbone": spec.digest(), "masks": masks.describe(), "input": input_fingerprint},
                      sort_keys=True).encode()
    return hashlib.blake2b(blob, digest_size=8).hexdigest()


def save_checkpoint(path, bank: ExtractorBank, masks: MaskSet, meta: dict) -> None:
    tensors = []
    for p in bank.parameters():
        tensors.append(("param", p.name, p.value))
    for name, buf in bank.buffers().items():
        tensors.append(("buffer", name, buf))
    entries, blobs, offset = [], [], 0
    for kind, name, arr in tensors:
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"kind": kind, "id": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    spec = bank.spec
    header = {
        "meta": meta,
        "backbone": {"input_shape": list(spec.input_shape), "channels": list(spec.channels),
                     "in_channels": spec.in_channels},
        "masks": masks.describe(),
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(head)) + head)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def _masks_from(desc: dict) -> MaskSet:
    return MaskSet(tuple(ConceptMask(desc["axis"], np.array([int(c) for c in m["bits"]]), m["name"])
                         for m in desc["masks"]))


def load_checkpoint(path, dtype=np.float32) -> tuple[ExtractorBank, MaskSet, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16 : 16 + hlen])
    body = data[16 + hlen :]
    bb = header["backbone"]
    spec = BackboneSpec(tuple(bb["input_shape"]), tuple(bb["channels"]), bb["in_channels"])
    masks = _masks_from(header["masks"])
    bank = ExtractorBank.create(spec, masks, 0, dtype)
    params = {p.name: p for p in bank.parameters()}
    buffers = bank.buffers()
    seen = set()
    for e in header["tensors"]:
        arr = np.frombuffer(body, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"]).reshape(e["shape"])
        target = params[e["id"]].value if e["kind"] == "param" and e["id"] in params else buffers.get(e["id"])
        if target is None or target.shape != arr.shape:
            raise CheckpointError(f"{path}: tensor {e['id']} does not fit the model")
        target[...] = arr
        seen.add(e["id"])
    missing = (set(params) | set(buffers)) - seen
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)[:5]}")
    return bank, masks, header["meta"]
