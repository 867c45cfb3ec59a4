"""Bit-exact single-file checkpoints.

Layout (see docs/checkpoint-format.md)::

    UBNA-CKPT\\n
    version=1\\n
    header_length=<N>\\n
    <N bytes of UTF-8 JSON>\\n
    <raw little-endian tensor blocks, in header order>
"""
import json
import os

import numpy as np

from .batchnorm import BNLayerState
from .errors import (
    CorruptHeaderError,
    InvalidCheckpointStateError,
    TruncatedCheckpointError,
    VersionMismatchError,
)
from .model import Architecture, Model, ReLU, SoftmaxHead
from .nncore import LinearLayer

MAGIC = b"UBNA-CKPT\n"
FORMAT_VERSION = 1

F32 = "<f4"
F64 = "<f8"


def _layer_tensors(pos, layer):
    if isinstance(layer, BNLayerState):
        return [
            (f"{pos}.gamma", F32, layer.gamma),
            (f"{pos}.beta", F32, layer.beta),
            (f"{pos}.running_mean", F64, layer.running_mean),
            (f"{pos}.running_var", F64, layer.running_var),
            (f"{pos}.eps", F64, np.array([layer.eps])),
        ]
    if isinstance(layer, LinearLayer):
        return [(f"{pos}.weight", F32, layer.weight), (f"{pos}.bias", F32, layer.bias)]
    return []


def _layer_entry(layer):
    if isinstance(layer, BNLayerState):
        return {"type": "bn", "layer_index": layer.layer_index, "channels": layer.channels}
    if isinstance(layer, LinearLayer):
        return {"type": "linear", "in": layer.in_channels, "out": layer.out_channels}
    if isinstance(layer, ReLU):
        return {"type": "relu"}
    if isinstance(layer, SoftmaxHead):
        return {"type": "softmax"}
    raise TypeError(f"cannot serialize layer {layer!r}")


def to_bytes(model):
    tensors, blobs = [], []
    offset = 0
    for pos, layer in enumerate(model.layers):
        for name, dtype, arr in _layer_tensors(pos, layer):
            blob = np.ascontiguousarray(arr, dtype=dtype).tobytes()
            tensors.append(
                {"name": name, "dtype": dtype, "shape": list(np.shape(arr)), "offset": offset,
                 "nbytes": len(blob)}
            )
            blobs.append(blob)
            offset += len(blob)
    header = {
        "architecture": None if model.architecture is None else model.architecture.to_dict(),
        "num_classes": model.num_classes,
        "layers": [_layer_entry(l) for l in model.layers],
        "tensors": tensors,
        "payload_bytes": offset,
        "provenance": model.provenance,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    prefix = MAGIC + f"version={FORMAT_VERSION}\n".encode() + f"header_length={len(head)}\n".encode()
    return prefix + head + b"\n" + b"".join(blobs)


def save(model, path):
    data = to_bytes(model)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _read_line(buf, pos, what):
    end = buf.find(b"\n", pos)
    if end < 0:
        raise TruncatedCheckpointError(f"file ends inside the {what} line")
    return buf[pos:end].decode("ascii", errors="replace"), end + 1


def _key_value(line, key):
    k, sep, v = line.partition("=")
    if sep != "=" or k != key:
        raise CorruptHeaderError(f"expected '{key}=...', got {line!r}")
    try:
        return int(v)
    except ValueError:
        raise CorruptHeaderError(f"non-integer {key}: {v!r}") from None


def from_bytes(buf):
    if not buf.startswith(MAGIC):
        if MAGIC.startswith(buf):
            raise TruncatedCheckpointError("file ends inside the magic line")
        raise CorruptHeaderError("not a UBNA checkpoint (bad magic)")
    line, pos = _read_line(buf, len(MAGIC), "version")
    version = _key_value(line, "version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    line, pos = _read_line(buf, pos, "header_length")
    hlen = _key_value(line, "header_length")
    if len(buf) < pos + hlen + 1:
        raise TruncatedCheckpointError("file ends inside the JSON header")
    if buf[pos + hlen : pos + hlen + 1] != b"\n":
        raise CorruptHeaderError("header is not newline-terminated at its declared length")
    try:
        header = json.loads(buf[pos : pos + hlen].decode("utf-8"))
        payload_bytes = int(header["payload_bytes"])
        layer_entries = header["layers"]
        tensor_entries = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptHeaderError(f"unreadable header: {exc}") from None
    payload = buf[pos + hlen + 1 :]
    if len(payload) < payload_bytes:
        raise TruncatedCheckpointError(
            f"tensor payload has {len(payload)} of {payload_bytes} bytes"
        )
    if len(payload) > payload_bytes:
        raise CorruptHeaderError("trailing bytes after the tensor payload")

    tensors = {}
    for t in tensor_entries:
        try:
            dtype = np.dtype(t["dtype"])
            shape = tuple(t["shape"])
            start, nbytes = int(t["offset"]), int(t["nbytes"])
        except (KeyError, TypeError) as exc:
            raise CorruptHeaderError(f"bad tensor entry: {exc}") from None
        if t["dtype"] not in (F32, F64) or nbytes != dtype.itemsize * int(np.prod(shape)):
            raise CorruptHeaderError(f"inconsistent tensor entry {t.get('name')}")
        if start < 0 or start + nbytes > payload_bytes:
            raise CorruptHeaderError(f"tensor {t['name']} lies outside the payload")
        tensors[t["name"]] = np.frombuffer(payload, dtype=dtype, count=int(np.prod(shape)),
                                           offset=start).reshape(shape).copy()

    def get(name):
        try:
            return tensors[name]
        except KeyError:
            raise CorruptHeaderError(f"missing tensor {name}") from None

    layers = []
    for pos_, entry in enumerate(layer_entries):
        kind = entry.get("type")
        if kind == "bn":
            c = entry["channels"]
            gamma, beta = get(f"{pos_}.gamma"), get(f"{pos_}.beta")
            mean, var = get(f"{pos_}.running_mean"), get(f"{pos_}.running_var")
            eps = get(f"{pos_}.eps")
            if any(a.shape != (c,) for a in (gamma, beta, mean, var)) or eps.shape != (1,):
                raise InvalidCheckpointStateError(f"BN layer at {pos_} has inconsistent lengths")
            if np.any(var < 0) or not np.all(np.isfinite(var)):
                raise InvalidCheckpointStateError(f"BN layer at {pos_} has a negative variance")
            if not eps[0] > 0:
                raise InvalidCheckpointStateError(f"BN layer at {pos_} has non-positive eps")
            layers.append(BNLayerState(gamma, beta, mean, var, float(eps[0]), entry["layer_index"]))
        elif kind == "linear":
            w, b = get(f"{pos_}.weight"), get(f"{pos_}.bias")
            if w.shape != (entry["out"], entry["in"]) or b.shape != (entry["out"],):
                raise InvalidCheckpointStateError(f"linear layer at {pos_} has inconsistent shapes")
            layers.append(LinearLayer(w, b))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "softmax":
            layers.append(SoftmaxHead())
        else:
            raise CorruptHeaderError(f"unknown layer type {kind!r}")

    arch = header.get("architecture")
    if arch is not None:
        arch = Architecture(**{**arch, "hidden": tuple(arch["hidden"])})
    try:
        model = Model(layers, header["num_classes"], arch)
    except ValueError as exc:
        raise InvalidCheckpointStateError(str(exc)) from None
    model.provenance = header.get("provenance") or {}
    return model


def load(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
