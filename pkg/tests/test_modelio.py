import json
import struct

import numpy as np
import pytest

from ubna import modelio
from ubna.adapt import Offline, schedule_for, ubna_adapt
from ubna.datagen import DomainDataset
from ubna.errors import (
    CheckpointError,
    CorruptHeaderError,
    InvalidCheckpointStateError,
    TruncatedCheckpointError,
    VersionMismatchError,
)
from ubna.model import Architecture, Model


def adapted_model():
    model = Model.build(Architecture(hidden=(4, 3), num_classes=3), seed=1)
    data = DomainDataset(size=8, height=6, width=6, seed=2, class_means=((0.2,) * 3, (0.5,) * 3, (0.8,) * 3))
    ubna_adapt(model, data, schedule_for("ubna+", num_steps=3), Offline(4))
    return model


def assert_models_identical(a, b):
    assert [type(l) for l in a.layers] == [type(l) for l in b.layers]
    assert a.architecture == b.architecture and a.num_classes == b.num_classes
    assert a.provenance == b.provenance
    for (pa, na, xa), (pb, nb, xb) in zip(a.parameters(), b.parameters()):
        assert (pa, na) == (pb, nb) and xa.dtype == xb.dtype
        np.testing.assert_array_equal(xa, xb)
    for la, lb in zip(a.bn_layers, b.bn_layers):
        assert la.running_mean.dtype == lb.running_mean.dtype == np.float64
        np.testing.assert_array_equal(la.running_mean, lb.running_mean)
        np.testing.assert_array_equal(la.running_var, lb.running_var)
        assert la.eps == lb.eps and la.layer_index == lb.layer_index


def header_of(data):
    lines = data.split(b"\n", 3)
    hlen = int(lines[2].split(b"=")[1])
    start = sum(len(l) + 1 for l in lines[:3])
    return json.loads(data[start : start + hlen]), start + hlen + 1


def rebuild(header, payload, version=1):
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return (b"UBNA-CKPT\nversion=%d\nheader_length=%d\n" % (version, len(head))) + head + b"\n" + payload


def test_round_trip_bit_exact(tmp_path):
    model = adapted_model()
    path = tmp_path / "m.ckpt"
    modelio.save(model, path)
    back = modelio.load(path)
    assert_models_identical(model, back)
    x = np.random.default_rng(0).random((2, 5, 5, 3)).astype(np.float32)
    np.testing.assert_array_equal(model.forward(x), back.forward(x))


def test_save_load_save_byte_identical(tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    modelio.save(adapted_model(), a)
    modelio.save(modelio.load(a), b)
    assert a.read_bytes() == b.read_bytes()
    assert not (tmp_path / "a.ckpt.tmp").exists()


def test_layout_prefix_and_dtypes():
    data = modelio.to_bytes(adapted_model())
    assert data.startswith(b"UBNA-CKPT\nversion=1\nheader_length=")
    header, _ = header_of(data)
    kinds = {t["name"].split(".")[1]: t["dtype"] for t in header["tensors"]}
    assert kinds["weight"] == kinds["gamma"] == "<f4"
    assert kinds["running_var"] == kinds["eps"] == "<f8"
    assert header["provenance"]["adaptation"]["schedule"]["alpha_layer"] == 0.03


def test_hand_built_fixture():
    """A checkpoint assembled with struct, independent of the writer."""
    gamma, beta, mean, var, eps = [2.0], [0.5], [0.25], [4.0], 1e-3
    tensors, payload = [], b""
    for name, code, vals in [
        ("0.gamma", "<f", gamma), ("0.beta", "<f", beta), ("0.running_mean", "<d", mean),
        ("0.running_var", "<d", var), ("0.eps", "<d", [eps]),
    ]:
        blob = struct.pack(code[0] + code[1] * len(vals), *vals)
        tensors.append({"name": name, "dtype": "<f4" if code == "<f" else "<f8", "shape": [1],
                        "offset": len(payload), "nbytes": len(blob)})
        payload += blob
    header = {
        "architecture": None, "num_classes": 1, "payload_bytes": len(payload), "provenance": {},
        "layers": [{"type": "bn", "layer_index": 1, "channels": 1}, {"type": "softmax"}],
        "tensors": tensors,
    }
    model = modelio.from_bytes(rebuild(header, payload))
    bn = model.bn_layers[0]
    assert (bn.gamma[0], bn.beta[0], bn.running_mean[0], bn.running_var[0], bn.eps) == (
        2.0, 0.5, 0.25, 4.0, 1e-3)
    assert modelio.to_bytes(model) == rebuild(header, payload)


def test_truncation_detected():
    data = modelio.to_bytes(adapted_model())
    _, payload_start = header_of(data)
    for cut in (5, 15, 30, payload_start - 3, payload_start + 1, len(data) - 1):
        with pytest.raises(TruncatedCheckpointError):
            modelio.from_bytes(data[:cut])


def test_corrupt_header_detected():
    data = modelio.to_bytes(adapted_model())
    with pytest.raises(CorruptHeaderError):
        modelio.from_bytes(b"XBNA" + data[4:])
    with pytest.raises(CorruptHeaderError):
        modelio.from_bytes(data + b"\x00")
    header, start = header_of(data)
    broken = data[: data.index(b"{")] + b"[" + data[data.index(b"{") + 1 :]
    with pytest.raises(CorruptHeaderError):
        modelio.from_bytes(broken)
    header["tensors"][0]["nbytes"] += 4
    with pytest.raises(CorruptHeaderError):
        modelio.from_bytes(rebuild(header, data[start:]))


def test_version_mismatch():
    data = modelio.to_bytes(adapted_model())
    header, start = header_of(data)
    with pytest.raises(VersionMismatchError):
        modelio.from_bytes(rebuild(header, data[start:], version=2))


def test_invalid_state_rejected():
    data = modelio.to_bytes(adapted_model())
    header, start = header_of(data)
    payload = bytearray(data[start:])
    entry = next(t for t in header["tensors"] if t["name"].endswith("running_var"))
    payload[entry["offset"] : entry["offset"] + 8] = struct.pack("<d", -1.0)
    with pytest.raises(InvalidCheckpointStateError):
        modelio.from_bytes(rebuild(header, bytes(payload)))

    payload = bytearray(data[start:])
    entry = next(t for t in header["tensors"] if t["name"].endswith("eps"))
    payload[entry["offset"] : entry["offset"] + 8] = struct.pack("<d", 0.0)
    with pytest.raises(InvalidCheckpointStateError):
        modelio.from_bytes(rebuild(header, bytes(payload)))


def test_errors_share_base_class():
    for cls in (CorruptHeaderError, TruncatedCheckpointError, VersionMismatchError,
                InvalidCheckpointStateError):
        assert issubclass(cls, CheckpointError)
