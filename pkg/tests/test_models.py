import numpy as np
import pytest

from ueeg import Tape, Tensor, backward
from ueeg import layers as L
from ueeg.errors import BadMagic, ContainerShapeMismatch, InputTooSmall, ShapeMismatch
from ueeg.losses import binary_cross_entropy, categorical_cross_entropy
from ueeg.models import (
    ModelConfig,
    build_model,
    checkpoint_bytes,
    classify,
    encode,
    load_checkpoint,
    load_checkpoint_bytes,
    save_checkpoint,
)
from ueeg.rng import substream

import shape_walk

# Frozen output of tests/shape_walk.py.
GOLDEN_PARAMS = {
    "four_cnn": {"BMNIST": 2584349, "SEED": 260885, "ERN": 1304084, "SMR": 3189782,
                 "ThoughtViz": 213532, "tiny": 225812},
    "gru_encoder": {"BMNIST": 242717, "SEED": 300053, "ERN": 293652, "SMR": 259350,
                    "ThoughtViz": 252700, "tiny": 239380},
    "autoencoder": {"BMNIST": 17933226, "SEED": 460470, "ERN": 48358842, "SMR": 131911326,
                    "ThoughtViz": 256182, "tiny": 235018},
}
ARCHS = tuple(GOLDEN_PARAMS)


def tiny(arch, **kw):
    return build_model(ModelConfig(arch, 3, 16, 2, **kw))


def batch(n=4, c=3, t=16, seed=0):
    return np.random.default_rng(seed).normal(size=(n, c, t)).astype(np.float32)


class TestGoldenCounts:
    def test_table_matches_shape_walk(self):
        for arch, table in GOLDEN_PARAMS.items():
            fn = getattr(shape_walk, arch)
            for name, geo in shape_walk.GEOMETRIES.items():
                assert fn(*geo) == table[name]

    @pytest.mark.parametrize("arch", ARCHS)
    @pytest.mark.parametrize("name", ["ThoughtViz", "SEED", "tiny"])
    def test_model_counts(self, arch, name):
        model = build_model(ModelConfig(arch, *shape_walk.GEOMETRIES[name]))
        assert model.num_parameters() == GOLDEN_PARAMS[arch][name]


class TestFourCNN:
    def test_reference_kernels_at_thoughtviz(self):
        model = build_model(ModelConfig("four_cnn", 14, 32, 10))
        assert model.kernel_list() == [(32, (1, 4)), (32, (14, 1)), (50, (4, 25)), (100, (50, 2))]

    def test_channel_kernel_follows_c(self):
        assert build_model(ModelConfig("four_cnn", 62, 32, 3)).kernel_list()[1] == (32, (62, 1))

    def test_softmax_rows(self):
        p = classify(build_model(ModelConfig("four_cnn", 14, 32, 10)), batch(2, 14, 32))
        assert p.shape == (2, 10)
        np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)

    def test_too_small(self):
        with pytest.raises(InputTooSmall):
            ModelConfig("four_cnn", 3, 3, 2)
        with pytest.raises(InputTooSmall):
            ModelConfig("four_cnn", 0, 16, 2)

    def test_unknown_arch(self):
        with pytest.raises(ValueError):
            ModelConfig("lstm", 3, 16, 2)


class TestGRUEncoder:
    def test_hidden_size(self):
        model = build_model(ModelConfig("gru_encoder", 14, 32, 10))
        assert model.layers["gru"].hyper["hidden"] == 30
        assert model.layers["embed"]["kernel"].shape == (50 * 30, 128)

    @pytest.mark.parametrize("shape", [(1, 3, 16), (5, 3, 16)])
    def test_embedding_shape(self, shape):
        assert encode(tiny("gru_encoder"), batch(*shape)).shape == (shape[0], 128)

    def test_zero_gru_gives_bias(self):
        model = tiny("gru_encoder")
        for t in model.layers["gru"].weights.values():
            t._replace(np.zeros(t.shape))
        bias = model.layers["embed"]["bias"]
        bias._replace(np.arange(128, dtype=np.float32))
        np.testing.assert_array_equal(encode(model, batch()).data, np.broadcast_to(bias.data, (4, 128)))

    def test_unshared_variant(self):
        model = tiny("gru_encoder", gru_shared=False)
        assert "gru49" in model.layers and "gru" not in model.layers
        assert encode(model, batch()).shape == (4, 128)

    def test_depthwise_stage_keeps_map_independence(self):
        # each depthwise output map is built from the single stacked plane through its own kernel
        model = tiny("gru_encoder")
        p = model.layers["dw"]
        x = np.random.default_rng(0).normal(size=(2, 1, 32, 13)).astype(np.float32)
        full = L.depthwise_conv2d(Tensor(x), p).data
        w = p["kernel"].data.copy()
        w[7] = 0
        q = L.LayerParams(p.kind, {"kernel": Tensor(w), "bias": p["bias"]}, p.hyper)
        part = L.depthwise_conv2d(Tensor(x), q).data
        np.testing.assert_array_equal(part[:, 7], 0)
        np.testing.assert_array_equal(np.delete(part, 7, axis=1), np.delete(full, 7, axis=1))


class TestAutoencoder:
    def test_reconstruction_shape(self):
        assert tiny("autoencoder").forward(Tensor(batch())).shape == (4, 3, 16)

    def test_embedding_dim(self):
        model = build_model(ModelConfig("autoencoder", 14, 32, 10))
        assert encode(model, batch(2, 14, 32)).shape == (2, 128)

    def test_constant_input_loss(self):
        model = tiny("autoencoder")
        x = Tensor(np.full((2, 3, 16), 0.5))
        loss = binary_cross_entropy(model.forward(x), x).item()
        assert np.isfinite(loss) and loss > 0

    def test_minmax_preprocessing(self):
        out = tiny("autoencoder").preprocess(batch())
        assert out.min() == 0 and out.max() == 1


class TestEvalContract:
    @pytest.mark.parametrize("arch", ["four_cnn", "gru_encoder"])
    def test_encode_deterministic(self, arch):
        model = tiny(arch)
        assert np.array_equal(encode(model, batch()).data, encode(model, batch()).data)

    def test_train_mode_reproducible(self):
        outs = []
        for _ in range(2):
            model = tiny("four_cnn")
            outs.append(model.forward(Tensor(batch()), "train", substream(0, "dropout")).data)
        assert np.array_equal(outs[0], outs[1])

    @pytest.mark.parametrize("arch", ["four_cnn", "gru_encoder"])
    def test_batch_equivariance(self, arch):
        model = tiny(arch)
        x = batch(5)
        perm = np.array([3, 0, 4, 1, 2])
        np.testing.assert_allclose(classify(model, x[perm]), classify(model, x)[perm], atol=1e-6)

    @pytest.mark.parametrize("arch", ["four_cnn", "gru_encoder"])
    def test_single_sample_matches_batch(self, arch):
        model = tiny(arch)
        x = batch(4)
        np.testing.assert_allclose(classify(model, x[2:3])[0], classify(model, x)[2], atol=1e-6)

    def test_binary_rows(self):
        p = classify(tiny("four_cnn"), batch())
        np.testing.assert_allclose(p[:, 0] + p[:, 1], 1, atol=1e-6)

    def test_geometry_checked(self):
        with pytest.raises(ShapeMismatch):
            encode(tiny("four_cnn"), batch(2, 4, 16))

    @pytest.mark.parametrize("arch", ARCHS)
    def test_backward_reaches_every_parameter(self, arch):
        model = tiny(arch)
        x = Tensor(batch())
        with Tape() as tape:
            out = model.forward(x, "train")
            if arch == "autoencoder":
                loss = binary_cross_entropy(out, np.full(x.shape, 0.5))
            else:
                loss = categorical_cross_entropy(out, [0, 1, 0, 1])
        grads = backward(tape, loss)
        for name, t in model.named_parameters():
            assert grads[t].shape == t.shape, name


class TestCheckpoint:
    @pytest.mark.parametrize("arch", ARCHS)
    def test_round_trip_bit_exact(self, arch, tmp_path):
        model = tiny(arch, seed=3)
        model.forward(Tensor(batch()), "train")  # move batchnorm statistics
        path = tmp_path / "m.ueeg"
        save_checkpoint(model, path)
        again = load_checkpoint(path)
        assert checkpoint_bytes(again) == path.read_bytes()
        for (n1, a), (n2, b) in zip(model.named_parameters(), again.named_parameters()):
            assert n1 == n2 and np.array_equal(a.data, b.data)
        x = batch()
        assert np.array_equal(encode(model, x).data, encode(again, x).data)

    def test_header(self):
        buf = checkpoint_bytes(tiny("four_cnn"))
        assert buf[:4] == b"UEEG" and buf[4] == 1

    def test_bad_magic(self):
        with pytest.raises(BadMagic):
            load_checkpoint_bytes(b"XXXX" + checkpoint_bytes(tiny("four_cnn"))[4:])

    def test_truncated(self):
        buf = checkpoint_bytes(tiny("four_cnn"))
        for cut in (5, 40, len(buf) - 10):
            with pytest.raises(ContainerShapeMismatch):
                load_checkpoint_bytes(buf[:cut])

    def test_config_round_trip(self):
        cfg = ModelConfig("gru_encoder", 3, 16, 2, gru_hidden=7, seed=11)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
