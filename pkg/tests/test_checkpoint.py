"""
检查点读写测试
"""

import json
import os
import struct
import tempfile

import numpy as np
import pytest

from src.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from src.data import generate_gaussian_blobs
from src.errors import BadMagicError, CheckpointError, TruncatedCheckpointError, VersionMismatchError
from src.nn_core import Linear, Model, SgdConfig, Softmax, build_mlp, fit
from src.quant import QuantSpec


@pytest.fixture
def temp_dir():
    with tempfile.TemporaryDirectory() as tmpdir:
        yield tmpdir


@pytest.fixture(scope="module")
def trained():
    data = generate_gaussian_blobs(classes=3, per_class=20, dim=4, spread=0.3, seed=0)
    model = build_mlp(4, [6, 5], 3, quant=QuantSpec(bits=4), seed=1)
    fit(model, data.train.features, data.train.labels, SgdConfig(epochs=2, batch_size=8))
    return model, data


class TestRoundTrip:
    """保存-读取往返"""

    def test_save_load_save_identical_bytes(self, trained, temp_dir):
        model, _ = trained
        first = save_checkpoint(model, os.path.join(temp_dir, "a", "model.qmul"))
        restored = load_checkpoint(first)
        second = save_checkpoint(restored, os.path.join(temp_dir, "b", "model.qmul"))
        with open(first, "rb") as f1, open(second, "rb") as f2:
            assert f1.read() == f2.read()

    def test_restored_model_behaves_identically(self, trained):
        model, data = trained
        restored = decode_checkpoint(encode_checkpoint(model))
        assert restored.fingerprint() == model.fingerprint()
        np.testing.assert_array_equal(restored.forward(data.test.features), model.forward(data.test.features))
        assert restored.scale_parameter_mask() == model.scale_parameter_mask()
        assert [node.spec for node in restored.quant_nodes()] == [node.spec for node in model.quant_nodes()]

    def test_float_model_without_bias_and_softmax(self):
        model = Model([Linear(weight=np.arange(6.0).reshape(2, 3)), Softmax()])
        restored = decode_checkpoint(encode_checkpoint(model))
        assert restored.layers[0].bias is None
        assert isinstance(restored.layers[1], Softmax)
        np.testing.assert_array_equal(restored.layers[0].weight, model.layers[0].weight)

    def test_header_layout(self, trained):
        model, _ = trained
        data = encode_checkpoint(model)
        magic, version, manifest_len = struct.unpack_from("<8sHI", data)
        assert magic == MAGIC and version == FORMAT_VERSION
        manifest = json.loads(data[14:14 + manifest_len])
        assert [entry["kind"] for entry in manifest["layers"]] == ["linear", "relu", "linear", "relu", "linear"]
        assert len(data) == 14 + manifest_len + 8 * manifest["payload_count"]


class TestCorruption:
    """损坏文件的报错"""

    def test_bad_magic(self, trained):
        data = bytearray(encode_checkpoint(trained[0]))
        data[0:1] = b"X"
        with pytest.raises(BadMagicError):
            decode_checkpoint(bytes(data))

    @pytest.mark.parametrize("keep", [4, 12, 20, -8])
    def test_truncated(self, trained, keep):
        data = encode_checkpoint(trained[0])
        with pytest.raises(TruncatedCheckpointError):
            decode_checkpoint(data[:keep])

    def test_version_mismatch(self, trained):
        data = bytearray(encode_checkpoint(trained[0]))
        struct.pack_into("<H", data, 8, FORMAT_VERSION + 1)
        with pytest.raises(VersionMismatchError):
            decode_checkpoint(bytes(data))

    def test_trailing_bytes(self, trained):
        with pytest.raises(CheckpointError):
            decode_checkpoint(encode_checkpoint(trained[0]) + b"\x00" * 8)

    def test_corrupt_manifest(self):
        manifest = b"{not json"
        data = struct.pack("<8sHI", MAGIC, FORMAT_VERSION, len(manifest)) + manifest
        with pytest.raises(CheckpointError):
            decode_checkpoint(data)

    def test_unknown_layer_kind(self):
        manifest = json.dumps({"layers": [{"kind": "conv"}], "payload_count": 0}).encode()
        data = struct.pack("<8sHI", MAGIC, FORMAT_VERSION, len(manifest)) + manifest
        with pytest.raises(CheckpointError):
            decode_checkpoint(data)

    def test_missing_file(self, temp_dir):
        with pytest.raises(CheckpointError):
            load_checkpoint(os.path.join(temp_dir, "missing.qmul"))
