"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SLM1"  u16 version
    u32 len  topology JSON (utf-8, sorted keys)
    u32 n    records
    record*: u16 len, path utf-8, u8 tag, tag-specific shape header, float32 payloads
    u32      CRC-32 of every preceding byte

Tags: 0 dense (W, bias), 1 decomposed (U, sigma, V, alpha, s, c, bias),
2 merged (U_k^T stored k x M, VS_k stored N x k, bias), 3 raw parameter tensor.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .lowrank import DecomposedLinear, DenseLinear, MergedLinear
from .models import BowClassifier, Encoder, EncoderConfig, MLP, Model

MAGIC = b"SLM1"
VERSION = 1
TAG_DENSE, TAG_DECOMPOSED, TAG_MERGED, TAG_PARAM = 0, 1, 2, 3
_F32 = np.dtype("<f4")


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


# ---------------------------------------------------------------- writing


def _f32(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype=np.float64).astype(_F32).tobytes()


def _pack_bias(buf: io.BytesIO, layer) -> None:
    if layer.bias is not None:
        buf.write(_f32(layer.bias.data))


def _write_layer(buf: io.BytesIO, layer) -> None:
    m, n = layer.shape
    has_bias = int(layer.bias is not None)
    if isinstance(layer, DenseLinear):
        buf.write(struct.pack("<BIIB", TAG_DENSE, m, n, has_bias))
        buf.write(_f32(layer.W.data))
    elif isinstance(layer, DecomposedLinear):
        r = layer.sigma.data.shape[0]
        buf.write(struct.pack("<BIIIBB", TAG_DECOMPOSED, m, n, r, has_bias, int(layer.frozen)))
        buf.write(_f32([float(layer.alpha.data), layer.s, layer.c]))
        buf.write(_f32(layer.U.data))
        buf.write(_f32(layer.sigma.data))
        buf.write(_f32(layer.V.data))
    elif isinstance(layer, MergedLinear):
        buf.write(struct.pack("<BIIIB", TAG_MERGED, m, n, layer.k, has_bias))
        buf.write(_f32(layer.U_k.data.T))
        buf.write(_f32(layer.VS_k.data))
    else:
        raise TypeError(f"cannot serialise layer of type {type(layer).__name__}")
    _pack_bias(buf, layer)


def _write_param(buf: io.BytesIO, arr: np.ndarray) -> None:
    buf.write(struct.pack("<BB", TAG_PARAM, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(_f32(arr))


def dumps(model: Model) -> bytes:
    topo = dict(model.topology())
    topo["compressible"] = list(model.registry.compressible)
    topo_bytes = json.dumps(topo, sort_keys=True, separators=(",", ":")).encode()
    extra = model.extra_parameters()

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    buf.write(struct.pack("<I", len(topo_bytes)))
    buf.write(topo_bytes)
    buf.write(struct.pack("<I", len(extra) + len(model.registry)))
    for name, t in extra.items():
        _write_path(buf, name)
        _write_param(buf, t.data)
    for path, layer in model.registry.items():
        _write_path(buf, path)
        _write_layer(buf, layer)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def _write_path(buf: io.BytesIO, path: str) -> None:
    raw = path.encode()
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(dumps(model))


# ---------------------------------------------------------------- reading


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def floats(self, *shape: int) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(self.take(4 * count), dtype=_F32).astype(np.float64)
        return arr.reshape(shape)


def _model_from_topology(topo: dict) -> Model:
    kind, cfg = topo.get("kind"), topo.get("config", {})
    if kind == "encoder":
        model: Model = Encoder(EncoderConfig(**cfg))
    elif kind == "mlp":
        model = MLP(cfg["widths"])
    elif kind == "bow_mlp":
        w = cfg["widths"]
        model = BowClassifier(w[0], w[1:-1], w[-1])
    else:
        raise CorruptCheckpointError(f"unknown model kind {kind!r}")
    return model


def _read_layer(r: _Reader, tag: int):
    if tag == TAG_DENSE:
        m, n, has_bias = r.unpack("<IIB")
        w = r.floats(m, n)
        return DenseLinear(w, r.floats(m) if has_bias else None)
    if tag == TAG_DECOMPOSED:
        m, n, k, has_bias, frozen = r.unpack("<IIIBB")
        alpha, s, c = r.floats(3)
        U, sigma, V = r.floats(m, k), r.floats(k), r.floats(n, k)
        layer = DecomposedLinear(U, sigma, V, alpha=alpha, s=s, c=c, bias=r.floats(m) if has_bias else None)
        layer.frozen = bool(frozen)
        return layer
    if tag == TAG_MERGED:
        m, n, k, has_bias = r.unpack("<IIIB")
        Ut, VS = r.floats(k, m), r.floats(n, k)
        return MergedLinear(Ut.T, VS, r.floats(m) if has_bias else None)
    raise CorruptCheckpointError(f"unknown record tag {tag}")


def loads(data: bytes) -> Model:
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 10:
        raise CorruptCheckpointError("checkpoint is truncated")
    (version,) = struct.unpack("<H", data[4:6])
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version} (reader supports {VERSION})")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError("checksum mismatch: checkpoint is corrupt")

    r = _Reader(body)
    r.pos = 6
    (topo_len,) = r.unpack("<I")
    try:
        topo = json.loads(r.take(topo_len))
    except ValueError as exc:
        raise CorruptCheckpointError(f"bad topology descriptor: {exc}") from None
    model = _model_from_topology(topo)
    extra = model.extra_parameters()
    (n_records,) = r.unpack("<I")
    for _ in range(n_records):
        (plen,) = r.unpack("<H")
        path = r.take(plen).decode()
        (tag,) = r.unpack("<B")
        if tag == TAG_PARAM:
            (ndim,) = r.unpack("<B")
            shape = r.unpack(f"<{ndim}I")
            arr = r.floats(*shape)
            if path not in extra or extra[path].shape != arr.shape:
                raise CorruptCheckpointError(f"parameter {path} does not fit the topology")
            extra[path].data[...] = arr
        else:
            layer = _read_layer(r, tag)
            if path not in model.registry:
                raise CorruptCheckpointError(f"layer {path} does not fit the topology")
            model.registry._layers[path] = layer
    if r.pos != len(body):
        raise CorruptCheckpointError("trailing bytes after the last record")
    model.registry.compressible = list(topo.get("compressible", []))
    return model


def load_checkpoint(path) -> Model:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return loads(data)
