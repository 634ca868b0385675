"""Binary checkpoint container for backbones and memories.

Layout (little-endian)::

    b"LOCA" | u32 version
    u32 config_block_len | config block
        u32 n_fields, then per field: u16 name_len, name, u8 tag,
        tag 0 -> u64 value; tag 1 -> u32 len + UTF-8 text
    u32 n_tensors, then per tensor: u16 name_len, name, u32 rows, u32 cols,
        rows*cols float64 in row-major order

Floats in the config block are written as UTF-8 ``repr`` text so they round-trip exactly.
"""
from __future__ import annotations

import struct
from dataclasses import fields

import numpy as np

from .backbone import Backbone, ModelConfig, weight_names
from .errors import FormatError
from .memory import GluSlots, LocasGluMemory, LocasMlpMemory, MlpSlots

MAGIC = b"LOCA"
VERSION = 1
MEMORY_PREFIX = "locas."


def _pack_str(s, width="H"):
    b = s.encode("utf-8")
    return struct.pack("<" + width, len(b)) + b


def write_container(path, meta: dict, tensors: dict):
    block = [struct.pack("<I", len(meta))]
    for key, value in meta.items():
        block.append(_pack_str(key))
        if isinstance(value, (int, np.integer)) and not isinstance(value, bool) and value >= 0:
            block.append(struct.pack("<BQ", 0, int(value)))
        else:
            block.append(struct.pack("<B", 1) + _pack_str(repr(value) if isinstance(value, float) else str(value), "I"))
    block = b"".join(block)
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(block)), block, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        if arr.ndim != 2:
            raise FormatError(f"tensor {name!r} must be 2-D, got shape {arr.shape}")
        out.append(_pack_str(name))
        out.append(struct.pack("<II", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file: needed {n} bytes at offset {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self, width="H"):
        (n,) = self.unpack("<" + width)
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("invalid UTF-8 in header") from exc


def read_container(path):
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != MAGIC:
        raise FormatError("bad magic bytes; not a LOCA checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (this reader handles version {VERSION})")
    (block_len,) = r.unpack("<I")
    block = _Reader(r.take(block_len))
    meta = {}
    (n_fields,) = block.unpack("<I")
    for _ in range(n_fields):
        key = block.text()
        (tag,) = block.unpack("<B")
        if tag == 0:
            (meta[key],) = block.unpack("<Q")
        elif tag == 1:
            meta[key] = block.text("I")
        else:
            raise FormatError(f"unknown config value tag {tag}")
    tensors = {}
    (n_tensors,) = r.unpack("<I")
    for _ in range(n_tensors):
        name = r.text()
        rows, cols = r.unpack("<II")
        raw = r.take(8 * rows * cols)
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(rows, cols).astype(np.float64)
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after the last tensor")
    return meta, tensors


def _config_from_meta(meta):
    kwargs = {}
    for f in fields(ModelConfig):
        if f.name not in meta:
            raise FormatError(f"config block is missing {f.name!r}")
        raw = meta[f.name]
        try:
            kwargs[f.name] = type(ModelConfig.__dataclass_fields__[f.name].default)(raw)
        except (TypeError, ValueError) as exc:
            raise FormatError(f"bad value for {f.name!r}: {raw!r}") from exc
    return ModelConfig(**kwargs)


def save_checkpoint(backbone: Backbone, path):
    write_container(path, backbone.config.as_dict(), {n: backbone.weights[n] for n in weight_names(backbone.config)})


def load_checkpoint(path) -> Backbone:
    meta, tensors = read_container(path)
    config = _config_from_meta(meta)
    from .backbone import weight_shape

    weights = {}
    for name in weight_names(config):
        if name not in tensors:
            raise FormatError(f"checkpoint is missing tensor {name!r}")
        if tensors[name].shape != weight_shape(config, name):
            raise FormatError(f"tensor {name!r} has shape {tensors[name].shape}, expected {weight_shape(config, name)}")
        weights[name] = tensors[name]
    return Backbone(config, weights)


def save_memory(mem, path):
    meta = {"kind": mem.kind, "n_layers": mem.n_layers, "d": mem.d}
    if mem.kind == "mlp":
        meta["epsilon"] = float(mem.epsilon)
    tensors = {}
    for i, layer in enumerate(mem.layers):
        p = f"{MEMORY_PREFIX}layers.{i}."
        for n in mem.matrices:
            tensors[p + n] = getattr(layer, n)
        if mem.kind == "glu":
            tensors[p + "tau"] = np.array([[layer.tau]])
            tensors[p + "selection"] = layer.selection.astype(np.float64)[None, :]
    write_container(path, meta, tensors)


def load_memory(path):
    meta, tensors = read_container(path)
    try:
        kind, n_layers = meta["kind"], int(meta["n_layers"])
    except KeyError as exc:
        raise FormatError(f"memory checkpoint is missing {exc.args[0]!r}") from exc
    layers = []
    try:
        for i in range(n_layers):
            p = f"{MEMORY_PREFIX}layers.{i}."
            if kind == "mlp":
                layers.append(MlpSlots(tensors[p + "K"], tensors[p + "V"]))
            elif kind == "glu":
                layers.append(GluSlots(
                    tensors[p + "G"], tensors[p + "K"], tensors[p + "V"],
                    float(tensors[p + "tau"][0, 0]), tensors[p + "selection"][0].astype(np.int64),
                ))
            else:
                raise FormatError(f"unknown memory kind {kind!r}")
    except KeyError as exc:
        raise FormatError(f"memory checkpoint is missing tensor {exc.args[0]!r}") from exc
    if kind == "mlp":
        return LocasMlpMemory(layers, float(meta.get("epsilon", "0.01")))
    return LocasGluMemory(layers)
