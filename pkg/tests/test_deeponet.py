import numpy as np
import pytest

from opsr.deeponet import (
    CheckpointError,
    DeepONet1DConfig,
    DeepONet2DConfig,
    DeepONetLossModel,
    DeepONetModel,
    build_deeponet_1d,
    build_deeponet_2d,
    forward,
    load_checkpoint,
    predict_field,
    read_checkpoint,
    save_checkpoint,
)
from opsr.fields import Grid1D, Grid2D
from opsr.nn import DenseLayer, Stack, adam_init, grad_check
from opsr.pooling import PooledSample, PoolingSpec, pool_avg, pooled_coords
from opsr.simulate import KDVB_DOMAIN

RNG = np.random.default_rng(7)


def small_1d_model(seed=1):
    cfg = DeepONet1DConfig(input_width=8, branch_hidden=(10, 10), trunk_hidden=(9, 9), p=6)
    return build_deeponet_1d(cfg, seed=seed)


def small_2d_model(seed=2):
    cfg = DeepONet2DConfig(
        input_shape=(4, 4),
        replicate_channels=6,
        conv1_channels=5,
        conv2_channels=4,
        mlp_hidden=(8, 8, 8),
        trunk_hidden=(8, 8),
        p=5,
    )
    return build_deeponet_2d(cfg, seed=seed)


def mlp_param_count(widths):
    return sum(w_in * w_out + w_out for w_in, w_out in zip(widths[:-1], widths[1:]))


class TestBuild1D:
    def test_branch_input_width_follows_pooling(self):
        # 1024-point fields pooled by M=8 and M=32
        for m, width in ((8, 128), (32, 32)):
            model = build_deeponet_1d(DeepONet1DConfig(input_width=1024 // m))
            assert model.branch.layers[0].n_in == width

    def test_parameter_count_closed_form(self):
        cfg = DeepONet1DConfig(input_width=16, branch_hidden=(32, 24), trunk_hidden=(20,), p=12)
        model = build_deeponet_1d(cfg)
        expected = (
            mlp_param_count((16, 32, 24, 12)) + mlp_param_count((1, 20, 12)) + 1
        )  # + scalar output bias
        assert model.parameter_count() == expected

    def test_default_widths(self):
        model = build_deeponet_1d(DeepONet1DConfig(input_width=64))
        dense = [l for l in model.branch.layers if isinstance(l, DenseLayer)]
        assert [l.n_out for l in dense] == [256, 256, 256, 128]
        assert model.p == 128
        assert model.coord_bounds == (KDVB_DOMAIN,)


class TestBuild2D:
    def test_flatten_width_16x16(self):
        cfg = DeepONet2DConfig(input_shape=(16, 16))
        assert cfg.flatten_width == 15 * 15 * 40 == 9000

    def test_flatten_width_8x8(self):
        cfg = DeepONet2DConfig(input_shape=(8, 8))
        assert cfg.flatten_width == 7 * 7 * 40 == 1960

    def test_m4_input_is_32x32(self):
        # 128x128 HR fields pooled by M=4
        cfg = DeepONet2DConfig(input_shape=(128 // 4, 128 // 4))
        assert cfg.input_shape == (32, 32)
        assert cfg.flatten_width == 31 * 31 * 40

    def test_too_small_input_rejected(self):
        with pytest.raises(ValueError):
            DeepONet2DConfig(input_shape=(1, 4))


class TestForward:
    def _forced_model(self):
        """Branch passes its 3 inputs through; trunk outputs a constant [4,5,6]."""
        cfg = DeepONet1DConfig(input_width=3, branch_hidden=(3,), trunk_hidden=(3,), p=3)
        branch = Stack([DenseLayer(np.eye(3), np.zeros(3), "identity")])
        trunk = Stack([DenseLayer(np.zeros((3, 1)), np.array([4.0, 5.0, 6.0]), "identity")])
        return DeepONetModel(
            case="kdvb",
            branch=branch,
            trunk=trunk,
            config=cfg,
            coord_bounds=(KDVB_DOMAIN,),
            output_bias=np.zeros(1),
        )

    def _sample(self, values):
        grid = Grid1D(12, 0.0, 10.0, periodic=True)
        return PooledSample(np.asarray(values, float), pooled_coords(grid, 4), PoolingSpec("avg", 4))

    def test_dot_product_combination(self):
        model = self._forced_model()
        assert forward(model, self._sample([1.0, 2.0, 3.0]), 3.3) == pytest.approx(32.0)

    def test_zero_branch_output_gives_bias(self):
        model = self._forced_model()
        model.output_bias[0] = -1.5
        for y in (0.0, 2.5, 9.0):
            assert forward(model, self._sample([0.0, 0.0, 0.0]), y) == pytest.approx(-1.5)

    def test_eval_determinism(self):
        model = small_1d_model()
        sample = PooledSample(
            RNG.normal(size=8), pooled_coords(Grid1D(32, 0, 10, True), 4), PoolingSpec("avg", 4)
        )
        assert forward(model, sample, 4.0) == forward(model, sample, 4.0)

    def test_branch_scaling_moves_output_linearly(self):
        model = self._forced_model()
        model.output_bias[0] = 2.0
        base = forward(model, self._sample([1.0, 2.0, 3.0]), 1.0)
        scaled = forward(model, self._sample([3.0, 6.0, 9.0]), 1.0)
        assert scaled - 2.0 == pytest.approx(3.0 * (base - 2.0), rel=1e-12)

    def test_query_shape_validation(self):
        model = small_1d_model()
        sample = PooledSample(
            RNG.normal(size=8), pooled_coords(Grid1D(32, 0, 10, True), 4), PoolingSpec("avg", 4)
        )
        with pytest.raises(Exception):
            forward(model, sample, np.array([1.0, 2.0]))


class TestPredictField:
    def test_shape_and_pointwise_equality_1d(self):
        model = small_1d_model()
        grid = Grid1D(32, 0.0, 10.0, periodic=True)
        sample = PooledSample(RNG.normal(size=8), pooled_coords(grid, 4), PoolingSpec("avg", 4))
        field = predict_field(model, sample, grid)
        assert field.values.shape == (32,)
        pointwise = np.array([forward(model, sample, x) for x in grid.coords()])
        np.testing.assert_allclose(field.values, pointwise, atol=1e-12)

    def test_shape_and_pointwise_equality_2d(self):
        model = small_2d_model()
        grid = Grid2D(8, 5)
        values = RNG.normal(size=(4, 4))
        sample = PooledSample(values, (np.linspace(0, 3, 4), np.linspace(0, 3, 4)), PoolingSpec("avg", 2))
        field = predict_field(model, sample, grid)
        assert field.values.shape == (5, 8)
        x, y = grid.x_coords(), grid.y_coords()
        for j in (0, 2, 4):
            for i in (0, 3, 7):
                assert field.values[j, i] == pytest.approx(
                    forward(model, sample, (x[i], y[j])), abs=1e-12
                )


class TestResolutionPairing:
    def test_1024_point_field_from_64_point_input(self):
        # M=16 on a 1024-point grid feeds a 64-wide branch
        model = build_deeponet_1d(
            DeepONet1DConfig(input_width=64, branch_hidden=(32,), trunk_hidden=(32,), p=8)
        )
        grid = Grid1D(1024, 0.0, 10.0, periodic=True)
        sample = PooledSample(
            RNG.normal(size=64), pooled_coords(grid, 16), PoolingSpec("max", 16)
        )
        field = predict_field(model, sample, grid)
        assert field.values.shape == (1024,)

    def test_build_deterministic_per_seed(self):
        cfg = DeepONet1DConfig(input_width=8, branch_hidden=(10,), trunk_hidden=(9,), p=6)
        a = build_deeponet_1d(cfg, seed=9)
        b = build_deeponet_1d(cfg, seed=9)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert np.array_equal(pa, pb)
        c = build_deeponet_2d(
            DeepONet2DConfig(input_shape=(3, 3), replicate_channels=4, conv1_channels=3,
                             conv2_channels=2, mlp_hidden=(6,), trunk_hidden=(6,), p=4),
            seed=9,
        )
        d = build_deeponet_2d(
            DeepONet2DConfig(input_shape=(3, 3), replicate_channels=4, conv1_channels=3,
                             conv2_channels=2, mlp_hidden=(6,), trunk_hidden=(6,), p=4),
            seed=9,
        )
        for pc, pd in zip(c.parameters(), d.parameters()):
            assert np.array_equal(pc, pd)


class TestChannelReplicationCollapse:
    def test_literal_path_matches_affine_collapse(self):
        model = small_2d_model()
        replicate = model.branch.layers[0]
        conv1 = model.branch.layers[1]
        x = RNG.normal(size=(3, 1, 4, 4))
        literal = conv1.forward(replicate.forward(x))
        collapsed_weight = conv1.kernels[:, :, 0, 0].sum(axis=1)
        collapsed = (
            x * collapsed_weight[None, :, None, None] + conv1.bias[None, :, None, None]
        )
        np.testing.assert_allclose(literal, collapsed, atol=1e-12)


class TestAssemblyGradients:
    def test_full_1d_assembly(self):
        model = small_1d_model()
        inputs = (RNG.normal(size=(3, 8)), RNG.uniform(0, 10, size=(3, 5, 1)))
        report = grad_check(DeepONetLossModel(model), inputs, RNG.normal(size=(3, 5)))
        assert report.max_rel_err < 1e-5

    def test_trunk_gradient_zero_when_branch_output_zero(self):
        model = small_1d_model()
        final = model.branch.layers[-1]
        final.weights[...] = 0.0
        final.bias[...] = 0.0
        harness = DeepONetLossModel(model)
        inputs = (RNG.normal(size=(3, 8)), RNG.uniform(0, 10, size=(3, 5, 1)))
        _, grads = harness.loss_and_grads(inputs, RNG.normal(size=(3, 5)))
        names = model.parameter_names()
        trunk_grads = [g for g, n in zip(grads, names) if n.startswith("trunk.")]
        assert all(np.all(g == 0.0) for g in trunk_grads)


class TestCheckpoints:
    def _roundtrip(self, model, tmp_path, adam_state=None):
        path = tmp_path / "model.osrm"
        save_checkpoint(model, path, adam_state=adam_state)
        return path

    def test_bitwise_roundtrip_1d(self, tmp_path):
        model = small_1d_model()
        model.in_mean, model.in_std = 0.37, 2.13
        model.pool_mode, model.pool_m = "max", 4
        grid = Grid1D(32, 0.0, 10.0, periodic=True)
        sample = PooledSample(RNG.normal(size=8), pooled_coords(grid, 4), PoolingSpec("max", 4))
        before = predict_field(model, sample, grid).values
        path = self._roundtrip(model, tmp_path)
        restored = load_checkpoint(path)
        assert restored.pool_mode == "max" and restored.pool_m == 4
        assert restored.in_mean == model.in_mean and restored.in_std == model.in_std
        for a, b in zip(model.parameters(), restored.parameters()):
            assert np.array_equal(a, b)
        after = predict_field(restored, sample, grid).values
        assert np.array_equal(before, after)

    def test_bitwise_roundtrip_2d_with_adam(self, tmp_path):
        model = small_2d_model()
        # give the batchnorm buffers non-trivial content
        model.branch.forward(RNG.normal(size=(4, 1, 4, 4)), train=True)
        state = adam_init(model.parameters(), lr=3e-3)
        state.t = 17
        for m in state.m:
            m += 0.5
        path = self._roundtrip(model, tmp_path, adam_state=state)
        restored, restored_state = read_checkpoint(path)
        for a, b in zip(model.buffers(), restored.buffers()):
            assert np.array_equal(a, b)
        assert restored_state.t == 17 and restored_state.lr == 3e-3
        for a, b in zip(state.m, restored_state.m):
            assert np.array_equal(a, b)

    def test_resave_is_byte_identical(self, tmp_path):
        model = small_1d_model()
        p1 = tmp_path / "a.osrm"
        p2 = tmp_path / "b.osrm"
        save_checkpoint(model, p1)
        save_checkpoint(load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_corrupted_magic(self, tmp_path):
        path = self._roundtrip(small_1d_model(), tmp_path)
        raw = path.read_bytes()
        path.write_bytes(b"NOPE" + raw[4:])
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated_blob(self, tmp_path):
        path = self._roundtrip(small_1d_model(), tmp_path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_descriptor_count_mismatch(self, tmp_path):
        model = small_1d_model()
        path = self._roundtrip(model, tmp_path)
        raw = path.read_bytes()
        token = f"param_count={model.parameter_count()}".encode()
        # same-length corruption keeps the descriptor parseable
        bad = str(model.parameter_count()).encode()
        bad = b"9" + bad[1:] if bad[0:1] != b"9" else b"1" + bad[1:]
        path.write_bytes(raw.replace(token, b"param_count=" + bad, 1))
        with pytest.raises(CheckpointError, match="count"):
            load_checkpoint(path)
