"""Binary checkpoint and encoder-export files.

Layout (all little-endian)::

    b"OMAE"  | u8 version | u8 kind (b"C" full, b"E" encoder only)
    u32 header length | header: canonical JSON (schedule, tensor table, metadata)
    float64 tensors in header order
    u32 CRC-32 of every preceding byte
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from .errors import FormatError, IncompatibleError
from .model import ModelParams, Schedule
from .nn import LayerSpec, Params
from .optim import AdamState

MAGIC = b"OMAE"
VERSION = 1
KIND_FULL = b"C"
KIND_ENCODER = b"E"
_F64 = np.dtype("<f8")


def layer_to_dict(spec: LayerSpec):
    return {
        "name": spec.name,
        "kind": spec.kind,
        "filter": list(spec.filter),
        "stride": list(spec.stride),
        "in_channels": spec.in_channels,
        "out_channels": spec.out_channels,
        "submanifold": spec.submanifold,
    }


def layer_from_dict(d):
    return LayerSpec(d["kind"], tuple(d["filter"]), tuple(d["stride"]), d["in_channels"],
                     d["out_channels"], d["submanifold"], d["name"])


def schedule_to_dict(schedule: Schedule, encoder_only=False):
    return {
        "grid_dims": list(schedule.grid_dims),
        "positional": schedule.positional,
        "encoder": [layer_to_dict(s) for s in schedule.encoder],
        "decoder": [] if encoder_only else [layer_to_dict(s) for s in schedule.decoder],
    }


def schedule_from_dict(d) -> Schedule:
    return Schedule(
        tuple(layer_from_dict(s) for s in d["encoder"]),
        tuple(layer_from_dict(s) for s in d["decoder"]),
        tuple(d["grid_dims"]),
        d["positional"],
    )


@dataclass
class Checkpoint:
    schedule: Schedule
    params: ModelParams
    adam: AdamState
    meta: Dict[str, Any] = field(default_factory=dict)


def _pack(kind, header, tensors):
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<BB", VERSION, kind[0]), struct.pack("<I", len(head)), head]
    for arr in tensors:
        parts.append(np.ascontiguousarray(arr, dtype=_F64).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def _unpack(raw, path="<bytes>"):
    if len(raw) < 14:
        raise FormatError(f"{path}: file too short ({len(raw)} bytes)", offset=len(raw))
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}", offset=0)
    version, kind = raw[4], raw[5:6]
    if version != VERSION:
        raise IncompatibleError(f"{path}: format version {version}, this build reads {VERSION}")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != crc:
        raise FormatError(f"{path}: CRC mismatch", offset=len(raw) - 4)
    (hlen,) = struct.unpack("<I", raw[6:10])
    header = json.loads(raw[10:10 + hlen].decode("utf-8"))
    offset = 10 + hlen
    tensors = []
    for name, shape in header["tensors"]:
        n = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * n
        if end > len(raw) - 4:
            raise FormatError(f"{path}: tensor {name} runs past end of data", offset=offset)
        tensors.append(np.frombuffer(raw, dtype=_F64, count=n, offset=offset).reshape(shape).astype(np.float64))
        offset = end
    if offset != len(raw) - 4:
        raise FormatError(f"{path}: {len(raw) - 4 - offset} trailing bytes", offset=offset)
    return kind, header, tensors


def _atomic_write(path, data):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    named = ckpt.params.tensors()
    table = [[n, list(a.shape)] for n, a in named]
    arrays = [a for _, a in named]
    if ckpt.adam.m:
        table += [[f"adam.m.{n}", list(a.shape)] for n, a in named]
        table += [[f"adam.v.{n}", list(a.shape)] for n, a in named]
        arrays += list(ckpt.adam.m) + list(ckpt.adam.v)
    header = {
        "schedule": schedule_to_dict(ckpt.schedule),
        "tensors": table,
        "adam_step": ckpt.adam.step,
        "meta": ckpt.meta,
    }
    return _pack(KIND_FULL, header, arrays)


def save_checkpoint(ckpt: Checkpoint, path):
    _atomic_write(path, checkpoint_bytes(ckpt))


def _params_from(schedule, tensors):
    it = iter(tensors)
    enc = [Params(next(it), next(it)) for _ in schedule.encoder]
    dec = [Params(next(it), next(it)) for _ in schedule.decoder]
    return ModelParams(enc, dec), list(it)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    kind, header, tensors = _unpack(raw, path)
    if kind == KIND_ENCODER:
        raise IncompatibleError(
            f"{path} is an encoder-only export; the decoder is absent, so it cannot be "
            "evaluated or resumed as a full checkpoint"
        )
    schedule = schedule_from_dict(header["schedule"])
    params, rest = _params_from(schedule, tensors)
    n = len(rest) // 2
    adam = AdamState(header["adam_step"], rest[:n], rest[n:])
    return Checkpoint(schedule, params, adam, header["meta"])


def encoder_bytes(schedule: Schedule, encoder: List[Params], meta=None) -> bytes:
    table, arrays = [], []
    for i, p in enumerate(encoder):
        table += [[f"enc{i + 1}.weight", list(p.weight.shape)], [f"enc{i + 1}.bias", list(p.bias.shape)]]
        arrays += [p.weight, p.bias]
    header = {"schedule": schedule_to_dict(schedule, encoder_only=True), "tensors": table,
              "meta": meta or {}}
    return _pack(KIND_ENCODER, header, arrays)


def export_encoder(ckpt: Checkpoint, path):
    meta = {k: ckpt.meta[k] for k in ("seed", "epoch") if k in ckpt.meta}
    _atomic_write(path, encoder_bytes(ckpt.schedule, ckpt.params.encoder, meta))


def read_encoder(path):
    """``(encoder layer specs, params list, header meta)`` from an export."""
    with open(path, "rb") as fh:
        raw = fh.read()
    kind, header, tensors = _unpack(raw, path)
    if kind != KIND_ENCODER:
        raise IncompatibleError(f"{path} is not an encoder export (kind {kind!r})")
    specs = [layer_from_dict(d) for d in header["schedule"]["encoder"]]
    it = iter(tensors)
    params = [Params(next(it), next(it)) for _ in specs]
    return specs, params, header


def import_encoder(path, schedule: Optional[Schedule] = None) -> List[Params]:
    """Encoder parameters from an export; checked layer by layer against ``schedule``."""
    specs, params, header = read_encoder(path)
    if schedule is not None:
        expected = list(schedule.encoder)
        for i in range(max(len(specs), len(expected))):
            got = specs[i] if i < len(specs) else None
            want = expected[i] if i < len(expected) else None
            if got != want:
                name = (want or got).name or f"#{i + 1}"
                raise IncompatibleError(
                    f"encoder layer {name} differs: file has {got}, schedule expects {want}"
                )
        if tuple(header["schedule"]["grid_dims"]) != tuple(schedule.grid_dims) or \
                header["schedule"]["positional"] != schedule.positional:
            raise IncompatibleError("encoder export was built for a different grid or input encoding")
    return params
