"""Checkpoint files: text header and manifest followed by raw little-endian tensor blobs.

Layout::

    DFCNET-CHECKPOINT 1
    spec_hash <sha256>
    iteration <int>
    meta <json>
    tensor <name> <dtype> <shape> <offset> <nbytes> <crc32>
    ...
    end
    <blob bytes>

Offsets are relative to the first byte after the ``end`` line.
"""
import json
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = "DFCNET-CHECKPOINT"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    tensors: dict
    spec_hash: str
    iteration: int = 0
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt):
    lines = [f"{MAGIC} {VERSION}", f"spec_hash {ckpt.spec_hash}", f"iteration {int(ckpt.iteration)}",
             "meta " + json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":"))]
    blobs = []
    offset = 0
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        if " " in name:
            raise CheckpointError(f"tensor name {name!r} contains a space")
        raw = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        shape = "x".join(str(d) for d in arr.shape) or "scalar"
        lines.append(f"tensor {name} {arr.dtype.name} {shape} {offset} {len(raw)} {zlib.crc32(raw):08x}")
        blobs.append(raw)
        offset += len(raw)
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode())
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path, expected_hash=None):
    with open(path, "rb") as fh:
        content = fh.read()
    marker = b"\nend\n"
    cut = content.find(marker)
    if cut < 0:
        raise CheckpointError(f"{path}: missing manifest terminator (truncated or not a checkpoint)")
    header = content[:cut].decode().split("\n")
    body = content[cut + len(marker):]
    first = header[0].split()
    if len(first) != 2 or first[0] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if int(first[1]) != VERSION:
        raise CheckpointError(f"{path}: format version {first[1]}, this reader supports {VERSION}")
    spec_hash, iteration, meta = None, 0, {}
    tensors = {}
    for line in header[1:]:
        key, _, rest = line.partition(" ")
        if key == "spec_hash":
            spec_hash = rest
        elif key == "iteration":
            iteration = int(rest)
        elif key == "meta":
            meta = json.loads(rest)
        elif key == "tensor":
            name, dtype, shape, off, nbytes, crc = rest.split()
            off, nbytes = int(off), int(nbytes)
            raw = body[off:off + nbytes]
            if len(raw) != nbytes or f"{zlib.crc32(raw):08x}" != crc:
                raise CheckpointError(f"{path}: checksum mismatch for tensor {name}")
            dims = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
            tensors[name] = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<")).astype(dtype).reshape(dims)
        else:
            raise CheckpointError(f"{path}: unexpected header line {line!r}")
    if expected_hash is not None and spec_hash != expected_hash:
        raise CheckpointError(f"{path}: model spec hash {spec_hash[:12]} does not match expected {expected_hash[:12]}")
    return Checkpoint(tensors, spec_hash, iteration, meta)
