"""Binary checkpoint format (``.moec``).

Layout, all integers little-endian::

    b"MOEC"  u32 version
    u32 config_len  config JSON (UTF-8)
    u32 tensor_count
    per tensor: u16 name_len, name (UTF-8), u8 rank, u32 dims[rank],
                float64 payload, row-major

The config JSON carries the model config plus ``layer_experts``, the expert
count of every layer, so pruned and merged students round-trip.
"""

from __future__ import annotations

import io
import json
import os
import struct

import numpy as np

from moelab.errors import FormatError
from moelab.model import Expert, ModelConfig, MoELayer, MoEModel

MAGIC = b"MOEC"
VERSION = 1


def _config_json(model: MoEModel) -> bytes:
    doc = {"model": model.config.to_dict(), "layer_experts": model.expert_counts}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def dumps(model: MoEModel) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg = _config_json(model)
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    params = model.parameters()
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(model: MoEModel, path) -> None:
    data = dumps(model)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(data: bytes) -> MoEModel:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic bytes; not a MOEC checkpoint")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (cfg_len,) = r.unpack("<I", "config length")
    try:
        doc = json.loads(r.take(cfg_len, "config").decode("utf-8"))
        config = ModelConfig.from_dict(doc["model"])
        layer_experts = [int(n) for n in doc["layer_experts"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed config block: {exc}") from exc
    if len(layer_experts) != config.n_layers:
        raise FormatError("layer_experts length does not match n_layers")

    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "tensor name length")
        try:
            name = r.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not UTF-8") from exc
        (rank,) = r.unpack("<B", "tensor rank")
        dims = r.unpack(f"<{rank}I", "tensor dims")
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(8 * n, f"payload of {name}")
        if name in tensors:
            raise FormatError(f"duplicate tensor {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    if r.pos != len(data):
        raise FormatError("trailing bytes after tensor table")
    return _assemble(config, layer_experts, tensors)


def _assemble(config: ModelConfig, layer_experts: list[int], tensors: dict) -> MoEModel:
    d, f, v = config.d_model, config.d_ff, config.vocab_size

    def need(name, shape):
        if name not in tensors:
            raise FormatError(f"missing tensor {name}")
        arr = tensors.pop(name)
        if arr.shape != shape:
            raise FormatError(f"tensor {name} has shape {arr.shape}, expected {shape}")
        return arr

    embedding = need("embedding", (v, d))
    layers = []
    for li, n_exp in enumerate(layer_experts):
        router = need(f"layers.{li}.router", (n_exp, d))
        experts = [
            Expert(need(f"layers.{li}.experts.{ei}.w_in", (f, d)),
                   need(f"layers.{li}.experts.{ei}.w_out", (d, f)))
            for ei in range(n_exp)
        ]
        layers.append(MoELayer(router, experts))
    head = need("output_head", (v, d))
    if tensors:
        raise FormatError(f"unexpected tensors: {sorted(tensors)[:5]}")
    return MoEModel(config, embedding, layers, head)


def load_checkpoint(path) -> MoEModel:
    with open(path, "rb") as fh:
        return loads(fh.read())


def tensor_bytes(path) -> dict[str, bytes]:
    """Raw payload bytes of every tensor in a checkpoint file, keyed by name."""
    model = load_checkpoint(path)
    return {name: np.ascontiguousarray(a, dtype="<f8").tobytes()
            for name, a in model.parameters().items()}
