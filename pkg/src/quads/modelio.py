"""Packed model files, checkpoints and run-history CSVs.

Packed layout (little-endian throughout)::

    "QDSM" | version u16 | layer count u32
    per tensor:
        id      u16 length + UTF-8
        kind    u16 length + UTF-8   e.g. "conv1d;stride=2;act=gelu", "dense;act=gelu", "bias"
        ndim u8 | dims u32 * ndim
        storage u8                   0 = fp32, 1 = codebook
        fp32:     value f32 * P
        codebook: bits u8 | centroids f32 * 2**bits | indices, ceil(P*bits/8) bytes
    CRC-32 u32 of every preceding byte

Indices are packed LSB-first within each byte, in row-major weight order.
A full-precision checkpoint is the same file with every tensor stored fp32.
"""

from __future__ import annotations

import csv
import math
import struct
import zlib
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import FormatError
from .models import EncoderConfig, Layer, ModelGraph
from .quantizer import LayerCodebook, QuantizedModel

MAGIC = b"QDSM"
VERSION = 1
HEADER_BYTES = 4 + 2 + 4
CRC_BYTES = 4
STORE_FP32, STORE_CODEBOOK = 0, 1

HISTORY_FIELDS = ["cycle", "phase", "epoch", "l1", "l_gt", "l_dis", "l_centroid", "l_quant", "total", "acc", "f1"]


def pack_indices(indices, bits: int) -> bytes:
    v = np.asarray(indices, dtype=np.uint32).ravel()
    bitplanes = ((v[:, None] >> np.arange(bits, dtype=np.uint32)) & 1).astype(np.uint8)
    return np.packbits(bitplanes.ravel(), bitorder="little").tobytes()


def unpack_indices(buf: bytes, count: int, bits: int) -> np.ndarray:
    raw = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")
    planes = raw[: count * bits].reshape(count, bits).astype(np.uint32)
    return (planes << np.arange(bits, dtype=np.uint32)).sum(axis=1).astype(np.int32)


def _kind_tag(model: ModelGraph, name: str) -> str:
    layer_name, part = name.rsplit(".", 1)
    if part == "bias":
        return "bias"
    layer = next(l for l in model.all_layers() if l.name == layer_name)
    act = model.config.activation
    if layer.kind == "conv1d":
        return f"conv1d;stride={layer.stride};act={act}"
    return f"dense;act={act}"


def _meta_bytes(name: str, kind: str, shape) -> int:
    return 2 + len(name.encode()) + 2 + len(kind.encode()) + 1 + 4 * len(shape) + 1


def packed_size_bytes(qm: QuantizedModel) -> int:
    """File length predicted from shapes and bit lengths alone."""
    total = HEADER_BYTES + CRC_BYTES
    for name, t in qm.base.parameters().items():
        total += _meta_bytes(name, _kind_tag(qm.base, name), t.shape)
        p = t.data.size
        if name in qm.codebooks:
            b = qm.codebooks[name].bits
            total += 1 + 4 * (1 << b) + math.ceil(p * b / 8)
        else:
            total += 4 * p
    return total


def packed_bytes(qm: QuantizedModel) -> bytes:
    params = qm.base.parameters()
    out = bytearray(MAGIC)
    out += struct.pack("<HI", VERSION, len(params))
    for name, t in params.items():
        kind = _kind_tag(qm.base, name)
        for text in (name, kind):
            enc = text.encode("utf-8")
            out += struct.pack("<H", len(enc)) + enc
        out += struct.pack("<B", t.data.ndim) + struct.pack(f"<{t.data.ndim}I", *t.shape)
        cb = qm.codebooks.get(name)
        if cb is None:
            out += struct.pack("<B", STORE_FP32)
            out += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        else:
            if cb.indices.shape != t.shape:
                raise ValueError(f"{name}: codebook indices {cb.indices.shape} vs weight {t.shape}")
            out += struct.pack("<BB", STORE_CODEBOOK, cb.bits)
            out += np.ascontiguousarray(cb.centroids, dtype="<f4").tobytes()
            out += pack_indices(cb.indices, cb.bits)
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def save_packed(qm: QuantizedModel, path) -> int:
    data = packed_bytes(qm)
    Path(path).write_bytes(data)
    return len(data)


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf, self.pos, self.end = buf, 0, end

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > self.end:
            raise FormatError(f"truncated file while reading {what}", self.pos)
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _parse_kind(kind: str) -> tuple[str, dict[str, str]]:
    head, *rest = kind.split(";")
    return head, dict(part.split("=", 1) for part in rest)


def parse_packed(buf: bytes) -> QuantizedModel:
    if len(buf) < HEADER_BYTES + CRC_BYTES:
        raise FormatError(f"truncated file: {len(buf)} bytes is shorter than header + CRC", len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
    end = len(buf) - CRC_BYTES
    (stored,) = struct.unpack("<I", buf[end:])
    if zlib.crc32(buf[:end]) != stored:
        raise FormatError("CRC-32 mismatch", end)
    r = _Reader(buf, end)
    r.pos = 4
    version, count = r.unpack("<HI", "header")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}", 4)

    tensors: dict[str, np.ndarray] = {}
    kinds: dict[str, str] = {}
    codebooks: dict[str, LayerCodebook] = {}
    for _ in range(count):
        start = r.pos
        (n,) = r.unpack("<H", "layer id length")
        name = r.take(n, "layer id").decode("utf-8")
        (n,) = r.unpack("<H", "kind tag length")
        kinds[name] = r.take(n, "kind tag").decode("utf-8")
        (ndim,) = r.unpack("<B", "ndim")
        shape = r.unpack(f"<{ndim}I", "shape")
        size = int(np.prod(shape))
        (storage,) = r.unpack("<B", "storage tag")
        if storage == STORE_FP32:
            vals = np.frombuffer(r.take(4 * size, f"{name} values"), dtype="<f4")
            tensors[name] = vals.astype(np.float32).reshape(shape)
        elif storage == STORE_CODEBOOK:
            (bits,) = r.unpack("<B", "bit length")
            if not 1 <= bits <= 16:
                raise FormatError(f"{name}: bit length {bits} out of range", r.pos - 1)
            cents = np.frombuffer(r.take(4 * (1 << bits), f"{name} centroids"), dtype="<f4").astype(np.float32)
            nbytes = math.ceil(size * bits / 8)
            idx = unpack_indices(r.take(nbytes, f"{name} index stream"), size, bits).reshape(shape)
            if idx.size and idx.max() >= (1 << bits):
                raise FormatError(f"{name}: index out of range", start)
            codebooks[name] = LayerCodebook(bits, cents, idx)
            tensors[name] = cents[idx]
        else:
            raise FormatError(f"{name}: unknown storage tag {storage}", r.pos - 1)
    if r.pos != end:
        raise FormatError(f"{end - r.pos} unexpected trailing bytes before CRC", r.pos)

    model = _build_model(tensors, kinds)
    exempt = {name for name in tensors if name not in codebooks}
    return QuantizedModel(model, codebooks, exempt)


def _build_model(tensors: dict[str, np.ndarray], kinds: dict[str, str]) -> ModelGraph:
    layer_names = list(dict.fromkeys(n.rsplit(".", 1)[0] for n in tensors))
    layers, head = [], None
    conv_specs, ff_widths = [], []
    act = "gelu"
    for lname in layer_names:
        wname, bname = f"{lname}.weight", f"{lname}.bias"
        if wname not in tensors or bname not in tensors:
            raise FormatError(f"layer {lname} is missing its weight or bias")
        kind, opts = _parse_kind(kinds[wname])
        act = opts.get("act", act)
        w = Tensor(tensors[wname], requires_grad=True)
        b = Tensor(tensors[bname], requires_grad=True)
        if kind == "conv1d":
            stride = int(opts.get("stride", 1))
            conv_specs.append((w.shape[0], w.shape[2], stride))
            layer = Layer(lname, "conv1d", w, b, stride)
        elif kind == "dense":
            layer = Layer(lname, "dense", w, b)
        else:
            raise FormatError(f"layer {lname}: unknown kind {kind!r}")
        if lname == "head":
            head = layer
        else:
            if kind == "dense" and lname != "latent":
                ff_widths.append(w.shape[1])
            layers.append(layer)
    first = layers[0].weight
    n_mels = first.shape[1] if layers[0].kind == "conv1d" else first.shape[0]
    cfg = EncoderConfig(n_mels, tuple(conv_specs), tuple(ff_widths), layers[-1].weight.shape[1], act)
    return ModelGraph(cfg, layers, head, "student" if head is not None else "teacher")


def load_packed(path) -> QuantizedModel:
    return parse_packed(Path(path).read_bytes())


def save_checkpoint(model: ModelGraph, path) -> int:
    names = set(model.parameters())
    return save_packed(QuantizedModel(model, {}, names), path)


def load_checkpoint(path) -> ModelGraph:
    """Full-precision model; codebook layers, if any, come back reconstructed."""
    return load_packed(path).materialize()


def write_history(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=HISTORY_FIELDS, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_history(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    for row in rows:
        for k in HISTORY_FIELDS:
            if k in ("phase",):
                continue
            row[k] = int(row[k]) if k in ("cycle", "epoch") else float(row[k])
    return rows
