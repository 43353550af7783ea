import json
import struct

import numpy as np
import pytest

from meflab import models
from meflab.errors import CheckpointError, ConfigError, DivergenceError, ShapeError

from conftest import random_model


@pytest.mark.parametrize("arch", models.ARCHITECTURES)
def test_build_shapes_and_determinism(arch):
    spec = models.make_spec(arch)
    a, b = models.build(spec, 3), models.build(spec, 3)
    assert set(a.params) == set(spec.param_shapes())
    for k, v in a.params.items():
        assert v.shape == spec.param_shapes()[k]
        assert v.dtype == np.float32
        assert np.array_equal(v, b.params[k])
    assert a.logits(np.zeros((2, 1, 16, 16), np.float32)).shape == (2, 4)


def test_different_seeds_differ():
    spec = models.make_spec("mlp")
    assert not np.array_equal(models.build(spec, 0).params["1.dense.w"], models.build(spec, 1).params["1.dense.w"])


def test_params_are_read_only():
    m = random_model("mlp", 0)
    with pytest.raises(ValueError):
        m.params["1.dense.w"][0, 0] = 1.0


def test_unknown_arch_and_bad_stack():
    with pytest.raises(ConfigError):
        models.make_spec("resnet")
    with pytest.raises(ShapeError):
        models.make_spec("cnn-a", input_shape=(1, 6, 6)).param_shapes()


def test_spec_json_round_trip():
    spec = models.make_spec("cnn-b")
    again = models.ModelSpec.from_json(json.loads(json.dumps(spec.to_json())))
    assert again == spec and again.digest() == spec.digest()


def test_train_reaches_high_accuracy_and_history(shapes, trained_mlp):
    train_set, test_set = shapes
    assert models.accuracy(trained_mlp, test_set) >= 0.8
    assert trained_mlp.meta["epochs"] == 15


def test_train_is_deterministic(shapes):
    train_set, test_set = shapes
    cfg = models.TrainConfig(lr=0.05, epochs=2)
    a, ha = models.train(random_model("mlp", 0, np.float32), train_set, test_set, cfg)
    b, hb = models.train(random_model("mlp", 0, np.float32), train_set, test_set, cfg)
    assert ha == hb
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert [row["epoch"] for row in ha] == [1, 2]


def test_zero_learning_rate_keeps_parameters(shapes):
    train_set, test_set = shapes
    m = random_model("mlp", 0, np.float32)
    out, _ = models.train(m, train_set, test_set, models.TrainConfig(lr=0.0, epochs=1))
    assert all(np.array_equal(out.params[k], m.params[k]) for k in m.params)


def test_divergence_reports_epoch(shapes):
    train_set, test_set = shapes
    with pytest.raises(DivergenceError) as info, np.errstate(all="ignore"):
        models.train(random_model("mlp", 0, np.float32), train_set, test_set, models.TrainConfig(lr=1e30, epochs=3))
    assert info.value.epoch >= 1


def test_train_config_validation():
    with pytest.raises(ConfigError):
        models.TrainConfig(lr=-1)
    with pytest.raises(ConfigError):
        models.TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        models.TrainConfig(optimizer="adam")


def test_frozen_layer_is_not_updated(shapes):
    train_set, test_set = shapes
    m = random_model("mlp", 0, np.float32)
    m = models.Model(m.spec, m.params, m.meta, frozenset({"1.dense.w"}))
    out, _ = models.train(m, train_set, test_set, models.TrainConfig(epochs=1))
    assert np.array_equal(out.params["1.dense.w"], m.params["1.dense.w"])
    assert not np.array_equal(out.params["3.dense.w"], m.params["3.dense.w"])


def test_checkpoint_round_trip(tmp_path, trained_mlp):
    path = tmp_path / "m.mefw"
    models.save(trained_mlp, path)
    back = models.load(path)
    assert back.spec == trained_mlp.spec
    for k in trained_mlp.params:
        assert np.array_equal(back.params[k], trained_mlp.params[k])
    x = np.random.default_rng(0).uniform(size=(5, 1, 16, 16)).astype(np.float32)
    assert np.array_equal(back.logits(x), trained_mlp.logits(x))


def test_checkpoint_byte_layout(tmp_path):
    spec = models.make_spec("mlp", input_shape=(2,), num_classes=2, hidden=())
    w = np.array([[1.0, -2.0], [0.5, 0.25]], np.float32)
    b = np.array([3.0, -1.0], np.float32)
    path = tmp_path / "tiny.mefw"
    models.save(models.Model(spec, {"0.dense.w": w, "0.dense.b": b}), path)
    raw = path.read_bytes()
    assert raw[:4] == b"MEFW"
    version, hlen = struct.unpack("<II", raw[4:12])
    assert version == 1
    header = json.loads(raw[12:12 + hlen])
    assert header["spec_digest"] == spec.digest()
    payload = raw[12 + hlen:]
    assert payload == w.astype("<f4").tobytes() + b.astype("<f4").tobytes()


@pytest.mark.parametrize("mutate", ["magic", "version", "truncate", "trailing", "digest"])
def test_checkpoint_corruption_detected(tmp_path, mutate):
    path = tmp_path / "m.mefw"
    models.save(random_model("mlp", 0), path)
    raw = bytearray(path.read_bytes())
    if mutate == "magic":
        raw[:4] = b"XXXX"
    elif mutate == "version":
        raw[4:8] = struct.pack("<I", 9)
    elif mutate == "truncate":
        raw = raw[:-7]
    elif mutate == "trailing":
        raw += b"\0"
    else:
        hlen = struct.unpack("<I", raw[8:12])[0]
        header = json.loads(raw[12:12 + hlen])
        header["spec_digest"] = "0" * 64
        blob = json.dumps(header).encode()
        raw = raw[:8] + struct.pack("<I", len(blob)) + blob + raw[12 + hlen:]
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        models.load(path)


def test_predict_chunking_matches_single_pass():
    m = random_model("cnn-a", 0, np.float32)
    x = np.random.default_rng(0).uniform(size=(23, 1, 16, 16)).astype(np.float32)
    assert np.array_equal(m.predict(x, chunk=5), m.predict(x))


def test_float64_switch():
    m = random_model("mlp", 0, np.float32).astype(np.float64)
    assert m.dtype == np.float64
    assert m.loss(np.zeros((1, 1, 16, 16)), np.array([0])).dtype == np.float64
