"""Binary checkpoint container.

Layout (all integers and floats little-endian)::

    b"FATQ"  u32 version  u32 section_count
    section*:
        u32 name_len, name (utf-8)
        u8 kind            0 = float64 array, 1 = utf-8 JSON
        kind 0: u32 ndim, u64 dims[ndim], f64 payload[prod(dims)]
        kind 1: u64 byte_len, bytes

Sections appear in a fixed order (``meta``, then per layer ``layerN.*``,
then ``history``), so save -> load -> save is byte-identical.
"""
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fatq.trainer.layers import QatLayer, QatSettings
from fatq.trainer.model import TinyCNN

MAGIC = b"FATQ"
VERSION = 1
_ARRAY, _JSON = 0, 1
SPLITS = ("train", "test")


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: TinyCNN
    epoch: int = 0
    history: list = field(default_factory=list)  # (epoch, split, loss, accuracy)
    rng_state: dict = None
    extra: dict = field(default_factory=dict)


def _pack_name(name):
    raw = name.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _pack_array(name, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = _pack_name(name) + struct.pack("<BI", _ARRAY, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def _pack_json(name, obj):
    raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _pack_name(name) + struct.pack("<BQ", _JSON, len(raw)) + raw


def to_bytes(ckpt):
    model = ckpt.model
    s = model.settings
    meta = {
        "epoch": int(ckpt.epoch),
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
        "settings": {
            "mode": s.mode,
            "bits_w": s.bits_w,
            "bits_a": s.bits_a,
            "scheme": s.scheme,
            "norm_path": s.norm_path,
            "weight_norm": s.weight_norm,
        },
        "layers": [
            {"kind": l.kind, "stride": l.stride, "padding": l.padding, "has_generator": l.generator is not None}
            for l in model.layers
        ],
    }
    sections = [_pack_json("meta", meta)]
    for i, layer in enumerate(model.layers):
        sections.append(_pack_array(f"layer{i}.weight", layer.weight))
        gen = layer.generator if layer.generator is not None else np.zeros((0, 0))
        sections.append(_pack_array(f"layer{i}.generator", gen))
        sections.append(_pack_array(f"layer{i}.alphas", [layer.alpha_w, layer.alpha_a]))
    hist = np.array(
        [[e, SPLITS.index(sp), loss, acc] for e, sp, loss, acc in ckpt.history], dtype=np.float64
    ).reshape(-1, 4)
    sections.append(_pack_array("history", hist))
    return MAGIC + struct.pack("<II", VERSION, len(sections)) + b"".join(sections)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise CheckpointFormatError("truncated checkpoint")
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out

    def raw(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError("truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def from_bytes(buf):
    if buf[:4] != MAGIC:
        raise CheckpointFormatError("not a FATQ checkpoint (bad magic)")
    r = _Reader(buf)
    r.pos = 4
    version, count = r.take("<II")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    sections = {}
    for _ in range(count):
        (name_len,) = r.take("<I")
        name = r.raw(name_len).decode("utf-8")
        (kind,) = r.take("<B")
        if kind == _ARRAY:
            (ndim,) = r.take("<I")
            shape = r.take(f"<{ndim}Q") if ndim else ()
            n = int(np.prod(shape)) if ndim else 1
            sections[name] = np.frombuffer(r.raw(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
        elif kind == _JSON:
            (length,) = r.take("<Q")
            sections[name] = json.loads(r.raw(length).decode("utf-8"))
        else:
            raise CheckpointFormatError(f"unknown section kind {kind} in {name!r}")
    if r.pos != len(buf):
        raise CheckpointFormatError("trailing bytes after last section")

    meta = sections["meta"]
    layers = []
    for i, lm in enumerate(meta["layers"]):
        alphas = sections[f"layer{i}.alphas"]
        layers.append(
            QatLayer(
                lm["kind"],
                sections[f"layer{i}.weight"],
                generator=sections[f"layer{i}.generator"] if lm["has_generator"] else None,
                alpha_w=float(alphas[0]),
                alpha_a=float(alphas[1]),
                stride=lm["stride"],
                padding=lm["padding"],
            )
        )
    model = TinyCNN(layers, QatSettings(**meta["settings"]))
    history = [(int(e), SPLITS[int(sp)], float(loss), float(acc)) for e, sp, loss, acc in sections["history"]]
    return Checkpoint(model, meta["epoch"], history, meta["rng_state"], meta["extra"])


def atomic_write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, ckpt):
    atomic_write_bytes(path, to_bytes(ckpt))


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return from_bytes(path.read_bytes())
