import numpy as np
import pytest

from gxplab.checkpoint import file_digest, load_checkpoint, save_checkpoint
from gxplab.filters import apply_filter
from gxplab.models import (
    ACTIVATIONS,
    Model,
    SingleLayerModel,
    SmoothBlock,
    SmoothingConfig,
    build_model,
)
from gxplab.tensor import ShapeError, Tensor, conv1x1


def probe(shape, seed=0):
    return np.random.default_rng(seed).random(shape, dtype=np.float32)


class TestArchitectures:
    def test_fmnist_cnn_shapes_and_params(self):
        m = build_model("fmnist_cnn", (1, 28, 28), 10, seed=1)
        z = m.logits(probe((2, 1, 28, 28)))
        assert z.data.shape == (2, 10)
        # conv(1->32,5x5) + conv(32->64,5x5) + fc(3136->1024) + fc(1024->10), biases included
        assert m.param_count() == 832 + 51264 + 3212288 + 10250

    def test_single_layer_param_count(self):
        m = build_model("single_layer", (4,), 2, seed=1)
        assert m.param_count() == 4

    def test_small_resnet_forward(self):
        m = build_model("small_resnet", (3, 32, 32), 10, seed=1)
        z = m.logits(probe((2, 3, 32, 32)))
        assert z.data.shape == (2, 10)

    def test_score_is_max_logit(self):
        m = build_model("fmnist_cnn", (1, 28, 28), 10, seed=2)
        x = probe((3, 1, 28, 28), 3)
        np.testing.assert_array_equal(m.score(x), m.logits(x).data.max(axis=1))

    def test_unknown_architecture(self):
        with pytest.raises(ValueError, match="unknown architecture"):
            build_model("vgg16", (3, 32, 32), 10)

    def test_input_shape_mismatch(self):
        m = build_model("fmnist_cnn", (1, 28, 28), 10)
        with pytest.raises(ShapeError):
            m.logits(probe((2, 1, 32, 32)))

    def test_activation_registry_names(self):
        assert set(ACTIVATIONS) == {"identity", "softplus", "sigmoid", "tanh"}

    def test_single_layer_f_exact(self):
        w = np.array([0.5, -1.0, 2.0])
        m = SingleLayerModel(w, "tanh")
        x = np.array([1.0, 2.0, 0.25])
        assert m.f(x) == pytest.approx(np.tanh(w @ x), rel=1e-15)

    def test_single_layer_logits_and_predict(self):
        m = SingleLayerModel(np.array([1.0, -1.0]), "sigmoid")
        x = np.array([[2.0, 0.5], [0.0, 3.0]])
        z = m.logits(x).data
        np.testing.assert_allclose(z[:, 0], 0.0)
        np.testing.assert_allclose(z[:, 1], x @ m.w.data)
        np.testing.assert_array_equal(m.predict(x), [1, 0])


class TestSmoothing:
    def test_insertion_points_declared(self):
        assert build_model("fmnist_cnn", (1, 28, 28), 10).insertion_points == ["block1", "block2"]
        assert build_model("small_resnet", (3, 32, 32), 10).insertion_points == [
            "stem", "s1b1", "s1b2", "s2b1", "s2b2", "s3b1", "s3b2",
        ]

    @pytest.mark.parametrize("arch,shape", [("fmnist_cnn", (1, 28, 28)), ("small_resnet", (3, 32, 32))])
    def test_zero_init_identity_at_every_point(self, arch, shape):
        base = build_model(arch, shape, 10, seed=5)
        x = probe((2,) + shape, 6)
        ref = base.logits(x).data
        for point in base.insertion_points:
            for kind in ("gaussian", "mean", "median"):
                m = build_model(arch, shape, 10, seed=5,
                                smoothing=SmoothingConfig(kind=kind, placement=point))
                out = m.logits(x).data
                assert out.shape == ref.shape
                assert out.tobytes() == ref.tobytes(), (point, kind)

    def test_smoothed_resnet_output_shape_matches(self):
        base = build_model("small_resnet", (3, 32, 32), 10, seed=7)
        m = build_model("small_resnet", (3, 32, 32), 10, seed=7,
                        smoothing=SmoothingConfig(kind="gaussian", placement="s1b1"))
        x = probe((2, 3, 32, 32), 8)
        assert m.logits(x).data.shape == base.logits(x).data.shape

    def test_unknown_placement(self):
        with pytest.raises(ValueError, match="insertion point"):
            build_model("fmnist_cnn", (1, 28, 28), 10,
                        smoothing=SmoothingConfig(placement="block9"))

    def test_double_insertion_rejected(self):
        m = build_model("fmnist_cnn", (1, 28, 28), 10,
                        smoothing=SmoothingConfig(placement="block1"))
        with pytest.raises(ValueError, match="already"):
            m.insert_smoothing(SmoothingConfig(placement="block2"))

    def test_single_layer_has_no_points(self):
        with pytest.raises(ValueError, match="no insertion points"):
            build_model("single_layer", (4,), 2, smoothing=SmoothingConfig())

    def test_default_placement_is_first_point(self):
        m = build_model("fmnist_cnn", (1, 28, 28), 10, smoothing=SmoothingConfig())
        assert m.smoothing.placement == "block1"


class TestSmoothBlock:
    def test_zero_mix_is_identity(self):
        blk = SmoothBlock(3, "gaussian", dtype=np.float64)
        a = np.random.default_rng(9).random((2, 3, 6, 6))
        out = blk(Tensor(a)).data
        assert out.tobytes() == a.tobytes()

    def test_identity_mix_gaussian_constant_map(self):
        # with mix = I the block doubles a constant map on the interior; on the
        # border the zero padding attenuates the filtered branch by the sum of
        # the kernel entries that overlap the map
        v, sigma = 0.6, 0.8
        blk = SmoothBlock(1, "gaussian", kernel_size=3, sigma=sigma, dtype=np.float64)
        blk.mix.data = np.eye(1)
        a = np.full((1, 1, 5, 5), v)
        out = blk(Tensor(a)).data[0, 0]
        np.testing.assert_allclose(out[1:-1, 1:-1], 2 * v, rtol=1e-12)

        u = np.arange(-1.0, 2.0)
        g = np.exp(-(u[:, None] ** 2 + u[None, :] ** 2) / (2 * sigma**2))
        g /= g.sum()
        corner = v + v * g[1:, 1:].sum()   # window at (0,0) misses row/col 0 of the kernel
        edge = v + v * g[1:, :].sum()      # top edge misses only row 0
        assert out[0, 0] == pytest.approx(corner, rel=1e-12)
        assert out[0, 2] == pytest.approx(edge, rel=1e-12)

    def test_zero_mix_gradient_is_identity_path(self):
        blk = SmoothBlock(2, "gaussian", dtype=np.float64)
        a = Tensor(np.random.default_rng(10).random((1, 2, 4, 4)), requires_grad=True)
        blk(a).sum().backward()
        np.testing.assert_array_equal(a.grad, np.ones_like(a.data))

    def test_edge_preservation_norm_identity(self):
        rng = np.random.default_rng(11)
        for kind in ("gaussian", "mean", "median"):
            blk = SmoothBlock(3, kind, dtype=np.float64)
            blk.mix.data = rng.standard_normal((3, 3)) * 0.3
            a = rng.random((2, 3, 8, 8))
            out = blk(Tensor(a)).data
            branch = conv1x1(
                Tensor(apply_filter(a, kind, blk.kernel_size, blk.sigma)), Tensor(blk.mix.data)
            ).data
            np.testing.assert_allclose(
                np.linalg.norm(out - a), np.linalg.norm(branch), rtol=1e-9
            )

    def test_channel_mismatch(self):
        blk = SmoothBlock(4, "mean")
        with pytest.raises(ShapeError, match="channels"):
            blk(Tensor(np.ones((1, 3, 4, 4))))

    def test_median_tie_routes_to_lowest_index(self):
        # center window holds 0.5 three times (linear indices 1, 2, 4);
        # the subgradient must land on index 1 -> element (0, 1)
        vals = np.array([[0.3, 0.5, 0.5], [0.1, 0.5, 0.9], [0.2, 0.7, 0.8]])
        x = Tensor(vals.reshape(1, 1, 3, 3), requires_grad=True)
        from gxplab.tensor import median_filter2d

        out = median_filter2d(x, 3)
        assert out.data[0, 0, 1, 1] == 0.5
        mask = np.zeros((1, 1, 3, 3))
        mask[0, 0, 1, 1] = 1.0
        (out * Tensor(mask)).sum().backward()
        expected = np.zeros((3, 3))
        expected[0, 1] = 1.0
        np.testing.assert_array_equal(x.grad[0, 0], expected)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        m = build_model("small_resnet", (3, 16, 16), 10, seed=12)
        path = tmp_path / "model.gxp"
        save_checkpoint(path, m)
        arch, params = load_checkpoint(path)
        assert arch == "small_resnet"
        state = m.state_dict()
        assert params.keys() == state.keys()
        for k in state:
            assert params[k].dtype == np.float32
            assert params[k].tobytes() == state[k].tobytes(), k

    def test_round_trip_float64(self, tmp_path):
        m = build_model("single_layer", (6,), 2, seed=13)
        path = tmp_path / "w.gxp"
        save_checkpoint(path, m)
        _, params = load_checkpoint(path)
        assert params["w"].dtype == np.float64
        assert params["w"].tobytes() == m.w.data.tobytes()

    def test_save_is_deterministic(self, tmp_path):
        m = build_model("fmnist_cnn", (1, 28, 28), 10, seed=14)
        p1, p2 = tmp_path / "a.gxp", tmp_path / "b.gxp"
        save_checkpoint(p1, m)
        save_checkpoint(p2, m)
        assert file_digest(p1) == file_digest(p2)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.gxp"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)

    def test_truncated_reports_offset(self, tmp_path):
        m = build_model("single_layer", (8,), 2, seed=15)
        path = tmp_path / "w.gxp"
        save_checkpoint(path, m)
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(ValueError, match="offset"):
            load_checkpoint(path)

    def test_loaded_state_restores_model(self, tmp_path):
        m = build_model("fmnist_cnn", (1, 28, 28), 10, seed=16)
        path = tmp_path / "m.gxp"
        save_checkpoint(path, m)
        other = build_model("fmnist_cnn", (1, 28, 28), 10, seed=99)
        arch, params = load_checkpoint(path)
        other.load_state_dict(params)
        x = probe((2, 1, 28, 28), 17)
        assert other.logits(x).data.tobytes() == m.logits(x).data.tobytes()

    def test_state_dict_mismatch(self):
        m = build_model("fmnist_cnn", (1, 28, 28), 10)
        state = m.state_dict()
        state.pop("fc2.bias")
        with pytest.raises(ValueError, match="missing"):
            m.load_state_dict(state)
