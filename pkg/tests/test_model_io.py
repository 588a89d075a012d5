import json

import numpy as np
import pytest

from conftest import random_model
from pqaccel.errors import ConfigError, DataError, MissingBlobError, ShapeError, SizeMismatchError, \
    VersionMismatchError
from pqaccel.model import Model, Node, OpaqueOp
from pqaccel.model_io import load_model, models_equal, save_model
from pqaccel.quantizer import QuantScheme, quantize_layer
from pqaccel.tensor import ConvLayer


@pytest.fixture
def mixed_model(rng):
    a = ConvLayer(rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4), 1, 1, "a")
    b = ConvLayer(rng.normal(size=(6, 4, 3, 3)), rng.normal(size=6), 2, 1, "b")
    c = ConvLayer(rng.normal(size=(5, 6, 1, 1)), rng.normal(size=5), 1, 0, "c")
    return Model("mixed", [
        Node("a", a, "stem", False, (8, 8), True),
        Node("b", quantize_layer(b, QuantScheme("vq", 2, k_vq=7)), "feature-extraction", True, (8, 8), True),
        Node("c", quantize_layer(c, QuantScheme("dl", 4, l_dl=2, k_dl=4, rho=2)), "feature-extraction", True,
             (4, 4)),
        Node("head", OpaqueOp(1000, 400), "head"),
    ])


def test_round_trip_bit_exact(tmp_path, mixed_model):
    save_model(mixed_model, tmp_path / "m")
    loaded = load_model(tmp_path / "m")
    assert models_equal(mixed_model, loaded)
    x = np.random.default_rng(0).normal(size=(1, 3, 8, 8))
    assert Model("x", loaded.nodes[:3]).forward(x).tobytes() == Model("x", mixed_model.nodes[:3]).forward(x).tobytes()


def test_random_models_round_trip(tmp_path):
    r = np.random.default_rng(5)
    for i in range(25):
        m = random_model(r)
        save_model(m, tmp_path / "m")
        assert models_equal(m, load_model(tmp_path / "m")), i


def test_manifest_layout(tmp_path, mixed_model):
    save_model(mixed_model, tmp_path / "m")
    manifest = json.loads((tmp_path / "m" / "manifest.json").read_text())
    assert list(manifest) == ["format", "version", "name", "layers"]
    assert [e["type"] for e in manifest["layers"]] == ["conv", "quantized", "quantized", "opaque"]
    ref = manifest["layers"][0]["tensors"]["weights"]
    raw = (tmp_path / "m" / ref["file"]).read_bytes()
    np.testing.assert_array_equal(np.frombuffer(raw, "<f4").reshape(ref["shape"]), mixed_model["a"].op.weights)


def test_save_is_byte_stable(tmp_path, mixed_model):
    save_model(mixed_model, tmp_path / "a")
    save_model(mixed_model, tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_truncated_blob_names_layer(tmp_path, mixed_model):
    save_model(mixed_model, tmp_path / "m")
    blob = next((tmp_path / "m" / "blobs").glob("L0001.s0.codewords*"))
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(SizeMismatchError, match="'b'"):
        load_model(tmp_path / "m")


def test_missing_blob_and_version(tmp_path, mixed_model):
    save_model(mixed_model, tmp_path / "m")
    next((tmp_path / "m" / "blobs").glob("L0000.weights*")).unlink()
    with pytest.raises(MissingBlobError, match="'a'"):
        load_model(tmp_path / "m")
    save_model(mixed_model, tmp_path / "m")
    path = tmp_path / "m" / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["version"] = 99
    path.write_text(json.dumps(manifest))
    with pytest.raises(VersionMismatchError):
        load_model(tmp_path / "m")
    with pytest.raises(MissingBlobError):
        load_model(tmp_path / "nowhere")
    assert not issubclass(SizeMismatchError, MissingBlobError)
    assert issubclass(VersionMismatchError, DataError)


def test_hand_written_manifest(tmp_path):
    (tmp_path / "blobs").mkdir()
    (tmp_path / "blobs" / "w1.f32").write_bytes(np.arange(2 * 3 * 3 * 3, dtype="<f4").tobytes())
    (tmp_path / "blobs" / "b1.f32").write_bytes(np.zeros(2, dtype="<f4").tobytes())
    (tmp_path / "blobs" / "w2.f32").write_bytes(np.ones(4 * 2, dtype="<f4").tobytes())
    (tmp_path / "blobs" / "b2.f32").write_bytes(np.ones(4, dtype="<f4").tobytes())
    (tmp_path / "manifest.json").write_text("""{
 "format": "pqaccel-model", "version": 1, "name": "two",
 "layers": [
  {"name": "conv1", "type": "conv", "group": "feature-extraction", "target": true, "input_hw": [6, 6],
   "relu": true, "shape": [2, 3, 3, 3], "stride": 1, "padding": 1,
   "tensors": {"weights": {"file": "blobs/w1.f32", "dtype": "f32", "shape": [2, 3, 3, 3]},
               "bias": {"file": "blobs/b1.f32", "dtype": "f32", "shape": [2]}}},
  {"name": "conv2", "type": "conv", "group": "head", "target": false, "input_hw": [6, 6],
   "relu": false, "shape": [4, 2, 1, 1], "stride": 2, "padding": 0,
   "tensors": {"weights": {"file": "blobs/w2.f32", "dtype": "f32", "shape": [4, 2, 1, 1]},
               "bias": {"file": "blobs/b2.f32", "dtype": "f32", "shape": [4]}}}
 ]
}""")
    m = load_model(tmp_path)
    assert m.names == ["conv1", "conv2"]
    assert m["conv1"].op.shape == (2, 3, 3, 3) and m["conv2"].op.shape == (4, 2, 1, 1)
    assert m["conv1"].op.weights[1, 2, 2, 2] == 53.0
    assert m.forward(np.ones((1, 3, 6, 6))).shape == (1, 4, 3, 3)


def test_model_graph_errors(rng):
    conv = ConvLayer(rng.normal(size=(1, 1, 1, 1)), np.zeros(1))
    with pytest.raises(ConfigError):
        Model("m", [Node("a", conv), Node("a", conv)])
    m = Model("m", [Node("a", conv), Node("h", OpaqueOp(5))])
    with pytest.raises(ConfigError):
        m["zz"]
    with pytest.raises(ShapeError):
        m.forward(np.ones((1, 1, 2, 2)))
