import numpy as np
import pytest

from agbada.errors import (BadMagicError, ChecksumError, DimensionError, ParameterError,
                           ShapeConflictError, StateError, TruncatedFileError, WeightFileError)
from agbada.layers import Conv2D, Dense, Flatten, MaxPool2D
from agbada.model import (SequentialModel, build_gender_classifier, build_model, build_vgg16_base,
                          build_vgg_base, conv_layers, load_weights, save_weights, set_trainable)
from agbada.tensor import Rng, Stream
from agbada.train import bce_loss, sgd_step
from agbada.weights import decode, encode, read_weight_file
from oracles import conv_direct, numeric_grad, rel_error


@pytest.fixture(scope="module")
def vgg16():
    return build_model("vgg16", 180)


def _zero(model):
    for layer in model.layers:
        for key in layer.params:
            layer.params[key][...] = 0
    return model


class TestArchitecture:
    def test_base_census(self, vgg16):
        base = vgg16.layers[:vgg16.head_start]
        assert len(base) == 18
        assert sum(isinstance(l, Conv2D) for l in base) == 13
        assert sum(isinstance(l, MaxPool2D) for l in base) == 5

    def test_feature_map_ladder(self, vgg16):
        pools = [s for l, s in zip(vgg16.layers, vgg16.shapes) if isinstance(l, MaxPool2D)]
        assert [s[1] for s in pools] == [90, 45, 22, 11, 5]
        assert vgg16.shapes[vgg16.head_start - 1] == (512, 5, 5)

    def test_parameter_counts(self, vgg16):
        base = sum(l.n_params for l in vgg16.layers[:vgg16.head_start])
        assert base == 14_714_688
        assert vgg16["block1_conv1"].n_params == 1_792
        assert sum(l.n_params for l in vgg16.layers[vgg16.head_start:]) == 12_801
        assert vgg16.parameter_count() == 14_727_489
        assert vgg16["flatten"].output_shape((512, 5, 5)) == (12_800,)

    def test_head_layout(self, vgg16):
        kinds = [l.kind for l in vgg16.layers[vgg16.head_start:]]
        assert kinds == ["Flatten", "Dropout", "Dense", "Sigmoid"]
        assert vgg16.class_names == ("Female", "Male")
        assert vgg16.output_shape == (1,)

    def test_input_too_small(self):
        with pytest.raises(DimensionError):
            build_vgg16_base((3, 31, 64))

    def test_duplicate_names(self):
        with pytest.raises(ParameterError):
            SequentialModel([Flatten("x"), Flatten("x")], (1, 2, 2))

    def test_inconsistent_shapes_rejected_at_build(self):
        with pytest.raises(DimensionError):
            SequentialModel([Conv2D("a", 3, 4), Conv2D("b", 5, 4)], (3, 8, 8))

    @pytest.mark.parametrize("arch,size", [("vgg16", 32), ("vgg16", 45), ("mini", 17), ("mini", 24)])
    def test_inferred_shapes_equal_runtime(self, arch, size):
        model = build_model(arch, size)
        x = np.random.default_rng(size).random((2, 3, size, size)).astype(np.float32)
        for layer, shape in zip(model.layers, model.shapes):
            x = layer.forward(x)
            assert x.shape[1:] == shape

    def test_output_in_open_interval(self):
        model = build_model("mini", 16, seed=2)
        p = model.forward(np.random.default_rng(0).random((5, 3, 16, 16)).astype(np.float32))
        assert p.shape == (5, 1) and np.all((p > 0) & (p < 1))

    def test_unknown_arch(self):
        with pytest.raises(ParameterError):
            build_model("resnet", 32)


class TestFreezing:
    def test_last_four(self, vgg16):
        set_trainable(vgg16, "last_k_convs", 4)
        assert vgg16.trainable_parameter_count() == 9_452_033
        unfrozen = [c.name for c in conv_layers(vgg16) if c.trainable]
        assert unfrozen == ["block4_conv3", "block5_conv1", "block5_conv2", "block5_conv3"]

    def test_none_keeps_head(self, vgg16):
        set_trainable(vgg16, "none")
        assert sum(l.n_params for l in conv_layers(vgg16) if l.trainable) == 0
        assert vgg16.trainable_parameter_count() == 12_801

    def test_all(self, vgg16):
        set_trainable(vgg16, "all")
        assert vgg16.trainable_parameter_count() == 14_727_489

    @pytest.mark.parametrize("k", [-1, 14])
    def test_invalid_k(self, vgg16, k):
        with pytest.raises(ParameterError):
            set_trainable(vgg16, "last_k_convs", k)

    def test_frozen_bits_survive_training(self):
        model = build_model("mini", 16, seed=1)
        set_trainable(model, "last_k_convs", 1)
        r = np.random.default_rng(0)
        x = r.random((4, 3, 16, 16)).astype(np.float32)
        y = np.array([[0], [1], [0], [1]], np.float32)
        frozen = model["block1_conv1"].params["W"].copy(), model["block1_conv1"].params["b"].copy()
        live = model["block2_conv1"].params["W"].copy()
        for step in range(10):
            p = model.forward(x, "train", Rng(step, Stream.DROPOUT))
            _, dz = bce_loss(p, y)
            model.backward(dz, wrt="logits")
            assert model["block1_conv1"].grads == {}
            sgd_step(model, 0.1)
        assert model["block1_conv1"].params["W"].tobytes() == frozen[0].tobytes()
        assert model["block1_conv1"].params["b"].tobytes() == frozen[1].tobytes()
        assert not np.array_equal(model["block2_conv1"].params["W"], live)


def _toy(seed):
    conv = Conv2D("conv", 2, 3, activation="relu")
    dense = Dense("dense", 3 * 3 * 3, 2)
    model = SequentialModel([conv, MaxPool2D("pool"), Flatten("flatten"), dense], (2, 6, 7))
    model.init_params(seed)
    r = np.random.default_rng(seed)
    conv.params["b"] = r.standard_normal(3).astype(np.float32) * 0.1
    dense.params["b"] = r.standard_normal(2).astype(np.float32)
    return model.astype(np.float64)


class TestPasses:
    @pytest.mark.parametrize("seed", range(20))
    def test_whole_model_gradient_check(self, seed):
        model = _toy(seed)
        r = np.random.default_rng(seed + 500)
        x = r.standard_normal((2, 2, 6, 7))
        R = r.standard_normal((2, 2))
        model.forward(x, "train")
        dx = model.backward(R, full=True)
        loss = lambda: float(np.sum(model.forward(x, "infer") * R))
        assert rel_error(dx, numeric_grad(loss, x)) <= 1e-5
        for layer in model.layers:
            for key, value in layer.params.items():
                assert rel_error(layer.grads[key], numeric_grad(loss, value)) <= 1e-5, (layer.name, key)

    def test_zero_upstream_gradient(self):
        model = _toy(0)
        model.forward(np.ones((1, 2, 6, 7)), "train")
        model.backward(np.zeros((1, 2)))
        for layer in model.layers:
            for g in layer.grads.values():
                assert not g.any()

    def test_backward_without_forward(self):
        with pytest.raises(StateError):
            _toy(0).backward(np.zeros((1, 2)))

    def test_zero_model_outputs_half(self):
        model = _zero(build_model("mini", 16))
        x = np.random.default_rng(0).random((3, 3, 16, 16)).astype(np.float32)
        assert np.all(model.forward(x) == 0.5)

    def test_infer_is_repeatable(self):
        model = build_model("mini", 16, seed=4)
        x = np.random.default_rng(1).random((3, 3, 16, 16)).astype(np.float32)
        assert model.forward(x).tobytes() == model.forward(x).tobytes()

    def test_matches_hand_composition(self):
        base = build_vgg_base((3, 8, 8), ((2, 1), (3, 1)), seed=5)
        x = np.random.default_rng(2).random((2, 3, 8, 8)).astype(np.float32)

        def pool(a):
            n, c, h, w = a.shape
            return a[:, :, :h // 2 * 2, :w // 2 * 2].reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))

        h = x
        for name in ("block1_conv1", "block2_conv1"):
            layer = base[name]
            h = pool(np.maximum(conv_direct(h, layer.params["W"], layer.params["b"], (1, 1), (1, 1)), 0))
        assert rel_error(base.forward(x), h) <= 1e-5

    def test_input_shape_mismatch(self):
        with pytest.raises(DimensionError, match="input"):
            build_model("mini", 16).forward(np.zeros((1, 3, 15, 16), np.float32))

    def test_logits_gradient_requires_sigmoid(self):
        model = _toy(0)
        model.forward(np.ones((1, 2, 6, 7)), "train")
        with pytest.raises(StateError):
            model.backward(np.zeros((1, 2)), wrt="logits")


class TestPredict:
    def _with_bias(self, bias):
        model = _zero(build_model("mini", 16))
        model["dense"].params["b"][0] = bias
        return model

    def test_above_threshold_is_male(self):
        p = 0.7
        model = self._with_bias(np.log(p / (1 - p)))
        (label, prob), = model.predict(np.zeros((1, 3, 16, 16), np.float32))
        assert label == "Male" and prob == pytest.approx(0.7, abs=1e-6)

    def test_exact_half_is_class_zero(self):
        preds = self._with_bias(0.0).predict(np.ones((4, 3, 16, 16), np.float32))
        assert preds == [("Female", 0.5)] * 4

    def test_custom_threshold(self):
        (label, _), = self._with_bias(0.0).predict(np.zeros((1, 3, 16, 16), np.float32), threshold=0.4)
        assert label == "Male"


class TestWeightFiles:
    def test_round_trip_bit_exact(self, tmp_path):
        model = build_model("mini", 24, seed=9)
        path = tmp_path / "m.weights"
        save_weights(model, path)
        other = build_model("mini", 24, seed=10)
        assert load_weights(other, path) == sorted(dict(model.named_parameters()))
        for (n1, a), (n2, b) in zip(model.named_parameters(), other.named_parameters()):
            assert n1 == n2 and a.tobytes() == b.tobytes()

    def test_full_vgg16_round_trip(self, vgg16, tmp_path):
        path = tmp_path / "vgg16.weights"
        save_weights(vgg16, path)
        entries = read_weight_file(path)
        assert len(entries) == 28
        assert sum(e.size for e in entries) == 14_727_489
        state = vgg16.state_dict()
        assert all(state[e.name].tobytes() == e.values.tobytes() for e in entries)

    def test_layout(self):
        blob = encode({"a.W": np.array([[1.0, 2.0]], np.float32)})
        assert blob[:4] == b"VGW1"
        assert int.from_bytes(blob[4:8], "little") == 1
        assert int.from_bytes(blob[8:12], "little") == 1
        assert int.from_bytes(blob[12:16], "little") == 3
        assert blob[16:19] == b"a.W"
        # dtype 1, rank 2, dims (1, 2) as u64, then the two floats, then CRC
        assert len(blob) == 19 + 4 + 4 + 16 + 8 + 4

    def test_payload_flip_is_crc_error(self):
        blob = bytearray(encode({"w": np.arange(8, dtype=np.float32)}))
        blob[-8] ^= 0x01
        with pytest.raises(ChecksumError):
            decode(bytes(blob))

    def test_each_defect_is_distinct(self):
        blob = encode({"w": np.arange(8, dtype=np.float32)})
        with pytest.raises(BadMagicError):
            decode(b"")
        with pytest.raises(BadMagicError):
            decode(b"XGW1" + blob[4:])
        with pytest.raises(TruncatedFileError):
            decode(blob[:30])
        with pytest.raises(ChecksumError):
            decode(blob[:-1] + bytes([blob[-1] ^ 0xFF]))

    def test_every_single_byte_corruption_detected(self):
        model = build_model("mini", 16, seed=3)
        blob = encode(dict(model.named_parameters()))
        r = np.random.default_rng(77)
        for pos in r.integers(0, len(blob), size=200):
            bad = bytearray(blob)
            bad[pos] ^= int(r.integers(1, 256))
            with pytest.raises(WeightFileError):
                decode(bytes(bad))

    def test_shape_conflict(self, tmp_path):
        path = tmp_path / "m.weights"
        save_weights(build_model("mini", 16), path)
        with pytest.raises(ShapeConflictError):
            load_weights(build_model("mini", 24), path)

    def test_base_only_file_non_strict(self, tmp_path):
        base = build_vgg_base((3, 16, 16), ((8, 1), (16, 1)), seed=11)
        path = tmp_path / "base.weights"
        save_weights(base, path)
        model = build_model("mini", 16, seed=0)
        head_before = model["dense"].params["W"].copy()
        with pytest.raises(WeightFileError):
            load_weights(model, path, strict=True)
        applied = load_weights(model, path, strict=False)
        assert len(applied) == 4
        assert np.array_equal(model["block1_conv1"].params["W"], base["block1_conv1"].params["W"])
        assert model["dense"].params["W"].tobytes() == head_before.tobytes()

    def test_failed_load_leaves_model_untouched(self, tmp_path):
        path = tmp_path / "m.weights"
        save_weights(build_model("mini", 16, seed=1), path)
        blob = bytearray(path.read_bytes())
        blob[-6] ^= 0x10
        path.write_bytes(bytes(blob))
        model = build_model("mini", 16, seed=2)
        before = model.state_dict()
        with pytest.raises(ChecksumError):
            load_weights(model, path)
        assert all(before[k].tobytes() == v.tobytes() for k, v in model.named_parameters())
