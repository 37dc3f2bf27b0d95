"""Binary model files (``.snnc``).

Layout, all integers little-endian::

    b"SNNC"  u32 version  u32 kind  u32 T  u32 n_layers  u32 meta_len  meta (JSON)
    layer record * n_layers

    layer record:
        u32 tag
        u32 n_int    i64 * n_int      (shape header, flags)
        u32 n_float  f64 * n_float    (theta, eps, ...)
        u32 n_array  array * n_array
        u32 n_child  layer record * n_child   (ops of a spiking layer)

    array: u32 ndim, u32 * ndim dims, f32 little-endian data

``kind`` is 0 for a Network (ANN / QC-ANN) and 1 for a SpikingNetwork.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct

import numpy as np

from .nn import (AvgPool2d, BatchNorm, ClipScaled, ClipUnit, Conv2d, Flatten, Linear, Network, ReLU)
from .qc import MODES, QCActivation
from .snn import SpikingLayer, SpikingNetwork
from .tensor import DTYPE, Tensor

MAGIC = b"SNNC"
VERSION = 1
KIND_NETWORK, KIND_SNN = 0, 1

TAGS = {Linear: 1, Conv2d: 2, BatchNorm: 3, AvgPool2d: 4, Flatten: 5, ReLU: 6,
        ClipUnit: 7, ClipScaled: 8, QCActivation: 9, SpikingLayer: 20}
BY_TAG = {v: k for k, v in TAGS.items()}


class ModelFormatError(ValueError):
    """Bad magic, unsupported version or invalid contents."""


class TruncatedModelError(OSError):
    """File ended before the declared contents."""


# -- writing -----------------------------------------------------------------

def _u32(buf, v):
    buf.write(struct.pack("<I", int(v)))


def _write_array(buf, a):
    a = np.asarray(a, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
    _u32(buf, a.ndim)
    for d in a.shape:
        _u32(buf, d)
    buf.write(a.tobytes())


def _record(buf, tag, ints=(), floats=(), arrays=(), children=()):
    _u32(buf, tag)
    _u32(buf, len(ints))
    buf.write(struct.pack(f"<{len(ints)}q", *[int(i) for i in ints]))
    _u32(buf, len(floats))
    buf.write(struct.pack(f"<{len(floats)}d", *[float(f) for f in floats]))
    _u32(buf, len(arrays))
    for a in arrays:
        _write_array(buf, a)
    _u32(buf, len(children))
    for child in children:
        _write_layer(buf, child)


def _write_layer(buf, layer):
    tag = TAGS.get(type(layer))
    if tag is None:
        raise ModelFormatError(f"cannot serialize layer {layer!r}")
    if isinstance(layer, Linear):
        _record(buf, tag, arrays=(layer.weight.data, layer.bias.data))
    elif isinstance(layer, Conv2d):
        _record(buf, tag, ints=(layer.stride, layer.padding), arrays=(layer.weight.data, layer.bias.data))
    elif isinstance(layer, BatchNorm):
        _record(buf, tag, ints=(layer.num_features,), floats=(layer.eps, layer.momentum),
                arrays=(layer.gamma.data, layer.beta.data, layer.running_mean, layer.running_var))
    elif isinstance(layer, AvgPool2d):
        _record(buf, tag, ints=(layer.k,))
    elif isinstance(layer, (Flatten, ReLU)):
        _record(buf, tag)
    elif isinstance(layer, (ClipUnit, ClipScaled)):
        _record(buf, tag, ints=(layer.theta.requires_grad,), arrays=(layer.theta.data,))
    elif isinstance(layer, QCActivation):
        _record(buf, tag, ints=(layer.T, MODES.index(layer.mode), layer.theta.requires_grad),
                floats=(layer.p,), arrays=(layer.theta.data,))
    elif isinstance(layer, SpikingLayer):
        _record(buf, tag, ints=(layer.spiking, layer.step_shift, len(layer.in_shape), *layer.in_shape),
                floats=(layer.theta,), arrays=(layer.u0,), children=layer.ops)


def dumps(model) -> bytes:
    if isinstance(model, SpikingNetwork):
        kind, T = KIND_SNN, model.T
        meta = {"name": model.name, "input_shape": list(model.input_shape), "shift_mode": model.shift_mode}
    elif isinstance(model, Network):
        kind, T = KIND_NETWORK, 0
        meta = {"name": model.name, "input_shape": list(model.input_shape), "n_outputs": model.n_outputs}
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    buf = io.BytesIO()
    buf.write(MAGIC)
    for v in (VERSION, kind, T, len(model.layers)):
        _u32(buf, v)
    blob = json.dumps(meta, sort_keys=True).encode()
    _u32(buf, len(blob))
    buf.write(blob)
    for layer in model.layers:
        _write_layer(buf, layer)
    return buf.getvalue()


def save_model(path, model) -> str:
    """Write ``model`` to ``path``; returns the SHA-256 of the bytes written."""
    data = dumps(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def model_hash(model) -> str:
    return hashlib.sha256(dumps(model)).hexdigest()


# -- reading -----------------------------------------------------------------

class _Reader:
    def __init__(self, data: bytes, path="<bytes>"):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedModelError(f"{self.path}: truncated model file (needed {n} bytes at offset "
                                      f"{self.pos}, file has {len(self.data)})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def array(self):
        ndim = self.u32()
        dims = tuple(self.u32() for _ in range(ndim))
        n = int(np.prod(dims)) if dims else 1
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(DTYPE).reshape(dims)

    def record(self):
        tag = self.u32()
        n = self.u32()
        ints = struct.unpack(f"<{n}q", self.take(8 * n))
        n = self.u32()
        floats = struct.unpack(f"<{n}d", self.take(8 * n))
        arrays = [self.array() for _ in range(self.u32())]
        children = [self.record() for _ in range(self.u32())]
        return tag, ints, floats, arrays, children


def _positive_theta(theta, where):
    if not float(np.min(theta)) > 0:
        raise ModelFormatError(f"{where}: threshold must be positive, got {float(np.min(theta))}")


def _build_layer(rec, where):
    tag, ints, floats, arrays, children = rec
    cls = BY_TAG.get(tag)
    if cls is None:
        raise ModelFormatError(f"{where}: unknown layer tag {tag}")
    if cls is Linear:
        return Linear(arrays[0], arrays[1])
    if cls is Conv2d:
        return Conv2d(arrays[0], arrays[1], stride=ints[0], padding=ints[1])
    if cls is BatchNorm:
        return BatchNorm(ints[0], eps=floats[0], momentum=floats[1], gamma=arrays[0], beta=arrays[1],
                         running_mean=arrays[2], running_var=arrays[3])
    if cls is AvgPool2d:
        return AvgPool2d(ints[0])
    if cls in (Flatten, ReLU):
        return cls()
    if cls in (ClipUnit, ClipScaled):
        _positive_theta(arrays[0], where)
        layer = cls(1.0, trainable=bool(ints[0]))
        layer.theta = Tensor(arrays[0], requires_grad=bool(ints[0]))
        return layer
    if cls is QCActivation:
        _positive_theta(arrays[0], where)
        layer = QCActivation(1.0, T=ints[0], p=floats[0], mode=MODES[ints[1]], trainable=bool(ints[2]))
        layer.theta = Tensor(arrays[0], requires_grad=bool(ints[2]))
        return layer
    if cls is SpikingLayer:
        spiking, step_shift, nd = ints[:3]
        in_shape = tuple(ints[3:3 + nd])
        if spiking:
            _positive_theta(floats[0], where)
        ops = [_build_layer(c, f"{where}.op{j}") for j, c in enumerate(children)]
        layer = SpikingLayer(ops, floats[0], None, spiking=bool(spiking), step_shift=bool(step_shift),
                             in_shape=in_shape)
        layer.u0 = arrays[0].copy()
        return layer
    raise ModelFormatError(f"{where}: unhandled tag {tag}")


def loads(data: bytes, path="<bytes>"):
    r = _Reader(data, path)
    magic = r.take(4)
    if magic != MAGIC:
        raise ModelFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32()
    if version != VERSION:
        raise ModelFormatError(f"{path}: model file version {version} is not supported "
                               f"(this build reads version {VERSION})")
    kind, T, n_layers = r.u32(), r.u32(), r.u32()
    try:
        meta = json.loads(r.take(r.u32()).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: corrupt metadata: {exc}") from None
    layers = [_build_layer(r.record(), f"{path}: layer {i}") for i in range(n_layers)]
    if r.pos != len(data):
        raise ModelFormatError(f"{path}: {len(data) - r.pos} trailing bytes")
    if kind == KIND_SNN:
        return SpikingNetwork(layers, T, meta["input_shape"], meta["shift_mode"], name=meta["name"])
    if kind == KIND_NETWORK:
        return Network(layers, meta["input_shape"], meta["n_outputs"], name=meta["name"])
    raise ModelFormatError(f"{path}: unknown model kind {kind}")


def load_model(path):
    with open(path, "rb") as fh:
        return loads(fh.read(), path)
