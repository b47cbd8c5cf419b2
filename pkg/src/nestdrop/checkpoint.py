"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic  b"NDCKPT\\x00\\x01"
    u32       format version
    u32       manifest length L
    L bytes   UTF-8 JSON manifest (sorted keys): scalar fields plus a tensor
              table of {name, dtype, shape, offset, nbytes}
    ...       tensor payload, concatenated in table order
    u32       CRC-32 of every preceding byte

Writes go to a temporary file in the target directory and are renamed into
place, so a reader never observes a half-written checkpoint.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpointError
from .network import NetworkSpec

MAGIC = b"NDCKPT\x00\x01"
FORMAT_VERSION = 1
FIELDS = ("format_version", "freeze", "iteration", "label", "nd_states", "network", "rng_states",
          "solver", "tensors")


@dataclass
class Checkpoint:
    network: NetworkSpec
    params: dict
    velocity: dict
    iteration: int = 0
    nd_states: dict = field(default_factory=dict)  # name -> {"n", "s", "rho", "scale"}
    freeze: dict = field(default_factory=dict)  # layer name -> frozen leading filters
    rng_states: dict = field(default_factory=dict)  # stream name -> bit generator state
    solver: dict = field(default_factory=dict)
    label: str = ""
    format_version: int = FORMAT_VERSION

    def sweep_index(self, layer=None):
        """Sweep index of the (only, or named) nested-dropout layer."""
        if not self.nd_states:
            return None
        if layer is None:
            (state,) = self.nd_states.values()
        else:
            state = self.nd_states[layer]
        return state["s"]


def _flatten(prefix, tree):
    for lname in sorted(tree):
        for pname in sorted(tree[lname]):
            yield f"{prefix}/{lname}/{pname}", tree[lname][pname]


def to_bytes(ckpt: Checkpoint) -> bytes:
    table = []
    payload = []
    offset = 0
    for name, arr in list(_flatten("params", ckpt.params)) + list(_flatten("velocity", ckpt.velocity)):
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        data = arr.astype(dt, copy=False).tobytes()
        table.append({"name": name, "dtype": dt.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(data)})
        payload.append(data)
        offset += len(data)
    manifest = {
        "format_version": ckpt.format_version,
        "freeze": ckpt.freeze,
        "iteration": int(ckpt.iteration),
        "label": ckpt.label,
        "nd_states": ckpt.nd_states,
        "network": ckpt.network.to_dict(),
        "rng_states": ckpt.rng_states,
        "solver": ckpt.solver,
        "tensors": table,
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<II", ckpt.format_version, len(mbytes)) + mbytes + b"".join(payload)
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(raw: bytes, source="<bytes>") -> Checkpoint:
    head = len(MAGIC) + 8
    if len(raw) < head + 4:
        raise CorruptCheckpointError(f"{source}: truncated ({len(raw)} bytes)")
    if raw[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError(f"{source}: bad magic")
    version, mlen = struct.unpack("<II", raw[len(MAGIC) : head])
    if version != FORMAT_VERSION:
        raise CorruptCheckpointError(f"{source}: format version {version}, expected {FORMAT_VERSION}")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != crc:
        raise CorruptCheckpointError(f"{source}: checksum mismatch (truncated or altered)")
    try:
        manifest = json.loads(raw[head : head + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{source}: unreadable manifest: {exc}") from exc
    if tuple(sorted(manifest)) != FIELDS:
        raise CorruptCheckpointError(f"{source}: manifest fields {sorted(manifest)} != {list(FIELDS)}")
    if manifest["format_version"] != version:
        raise CorruptCheckpointError(f"{source}: manifest/header version disagree")
    blob = raw[head + mlen : -4]
    trees = {"params": {}, "velocity": {}}
    end = 0
    for t in manifest["tensors"]:
        kind, lname, pname = t["name"].split("/")
        dt = np.dtype(t["dtype"])
        start, stop = t["offset"], t["offset"] + t["nbytes"]
        if stop > len(blob) or t["nbytes"] != dt.itemsize * int(np.prod(t["shape"])):
            raise CorruptCheckpointError(f"{source}: tensor {t['name']} out of bounds")
        arr = np.frombuffer(blob[start:stop], dtype=dt).reshape(t["shape"]).astype(dt.newbyteorder("="))
        trees[kind].setdefault(lname, {})[pname] = arr
        end = max(end, stop)
    if end != len(blob):
        raise CorruptCheckpointError(f"{source}: {len(blob) - end} trailing payload bytes")
    return Checkpoint(
        network=NetworkSpec.from_dict(manifest["network"]),
        params=trees["params"],
        velocity=trees["velocity"],
        iteration=manifest["iteration"],
        nd_states=manifest["nd_states"],
        freeze=manifest["freeze"],
        rng_states=manifest["rng_states"],
        solver=manifest["solver"],
        label=manifest["label"],
        format_version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = to_bytes(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as exc:
        raise CorruptCheckpointError(f"{path}: no such checkpoint") from exc
    return from_bytes(raw, str(path))


def trees_equal(a, b):
    """Bitwise equality of two parameter trees."""
    if a.keys() != b.keys():
        return False
    for lname in a:
        if a[lname].keys() != b[lname].keys():
            return False
        for pname in a[lname]:
            x, y = a[lname][pname], b[lname][pname]
            if x.dtype != y.dtype or x.shape != y.shape or x.tobytes() != y.tobytes():
                return False
    return True


def checkpoints_equal(a: Checkpoint, b: Checkpoint):
    return to_bytes(a) == to_bytes(b)
