import numpy as np
import pytest

from opsr.fields import Field1D, Field2D, Grid1D, Grid2D
from opsr.pooling import (
    PooledSample,
    PoolingError,
    PoolingSpec,
    canonical_mode,
    pool,
    pool_avg,
    pool_max,
    pooled_coords,
)


def naive_pool_1d(values, m, mode):
    """Brute-force block pooling straight from the definition."""
    out = np.empty(len(values) // m)
    for i in range(len(out)):
        block = np.array([values[i * m + s] for s in range(m)])
        out[i] = np.sum(block) / m if mode == "avg" else np.max(block)
    return out


def naive_pool_2d(values, m, mode):
    ny, nx = values.shape
    out = np.empty((ny // m, nx // m))
    for j in range(ny // m):
        for i in range(nx // m):
            block = np.array(
                [values[j * m + s, i * m + t] for s in range(m) for t in range(m)]
            )
            out[j, i] = np.sum(block) / (m * m) if mode == "avg" else np.max(block)
    return out


def field_1d(values):
    return Field1D(Grid1D(len(values), 0.0, 10.0, periodic=True), np.asarray(values, float))


def field_2d(values):
    values = np.asarray(values, float)
    return Field2D(Grid2D(values.shape[1], values.shape[0]), values)


class TestModes:
    def test_canonical_tokens(self):
        assert canonical_mode("average") == "avg"
        assert canonical_mode("AVG") == "avg"
        assert canonical_mode("max") == "max"
        with pytest.raises(PoolingError):
            canonical_mode("median")

    def test_spec_validation(self):
        assert PoolingSpec("average", 4).mode == "avg"
        with pytest.raises(PoolingError):
            PoolingSpec("avg", 0)


class TestExamples:
    def test_avg_1d(self):
        s = pool_avg(field_1d([1.0, 2.0, 3.0, 4.0]), 2)
        np.testing.assert_allclose(s.values, [1.5, 3.5])

    def test_max_1d(self):
        s = pool_max(field_1d([1.0, 2.0, 3.0, 4.0]), 2)
        np.testing.assert_allclose(s.values, [2.0, 4.0])

    def test_avg_2d_single_block(self):
        s = pool_avg(field_2d(np.array([[1.0, 2.0], [3.0, 4.0]]).repeat(2, 0).repeat(2, 1)), 4)
        np.testing.assert_allclose(s.values, [[2.5]])

    def test_constant_preserved(self):
        for m in (1, 2, 4):
            assert np.all(pool_avg(field_1d(np.full(8, 3.3)), m).values == 3.3)
            assert np.all(pool_max(field_1d(np.full(8, 3.3)), m).values == 3.3)

    def test_window_must_divide(self):
        with pytest.raises(PoolingError):
            pool_avg(field_1d(np.zeros(10)), 3)
        with pytest.raises(PoolingError):
            pool_max(field_2d(np.zeros((8, 12))), 8)


class TestBruteForceOracle:
    def test_1d_matches_exactly(self):
        rng = np.random.default_rng(42)
        values = rng.normal(size=16)
        f = field_1d(values)
        for m in (1, 2, 4, 8):
            for mode, fn in (("avg", pool_avg), ("max", pool_max)):
                assert np.array_equal(fn(f, m).values, naive_pool_1d(values, m, mode))

    def test_2d_matches_exactly(self):
        rng = np.random.default_rng(43)
        values = rng.normal(size=(8, 8))
        f = field_2d(values)
        for m in (1, 2, 4):
            for mode, fn in (("avg", pool_avg), ("max", pool_max)):
                assert np.array_equal(fn(f, m).values, naive_pool_2d(values, m, mode))


class TestProperties:
    def test_identity_window(self):
        rng = np.random.default_rng(1)
        values = rng.normal(size=12)
        f = field_1d(values)
        assert np.array_equal(pool_avg(f, 1).values, values)
        assert np.array_equal(pool_max(f, 1).values, values)

    def test_avg_linearity(self):
        rng = np.random.default_rng(2)
        u, w = rng.normal(size=(2, 16))
        a, b = 2.5, -1.75
        left = pool_avg(field_1d(a * u + b * w), 4).values
        right = a * pool_avg(field_1d(u), 4).values + b * pool_avg(field_1d(w), 4).values
        np.testing.assert_allclose(left, right, atol=1e-12)

    def test_max_positive_scale_equivariance(self):
        rng = np.random.default_rng(3)
        u = rng.normal(size=16)
        alpha = 3.25
        np.testing.assert_allclose(
            pool_max(field_1d(alpha * u), 4).values, alpha * pool_max(field_1d(u), 4).values
        )

    def test_avg_composition(self):
        rng = np.random.default_rng(4)
        u = rng.normal(size=(16, 16))
        once = pool_avg(field_2d(u), 8).values
        twice_values = pool_avg(field_2d(u), 2).values
        # re-wrap intermediate on its own coarser grid to pool again
        inner = Field2D(Grid2D(8, 8), twice_values)
        composed = pool_avg(inner, 4).values
        np.testing.assert_allclose(composed, once, atol=1e-12)

    def test_max_dominates_avg(self):
        rng = np.random.default_rng(5)
        f = field_2d(rng.normal(size=(8, 8)))
        assert np.all(pool_max(f, 4).values >= pool_avg(f, 4).values)


class TestCoords:
    def test_1d_block_centroids(self):
        g = Grid1D(4, 0.0, 10.0, periodic=True)
        np.testing.assert_allclose(pooled_coords(g, 2), [1.25, 6.25])

    def test_identity_window_keeps_grid(self):
        g = Grid1D(6, 0.0, 3.0, periodic=False)
        np.testing.assert_allclose(pooled_coords(g, 1), g.coords())

    def test_2d_centroid_is_corner_mean(self):
        g = Grid2D(8, 4)
        xc, yc = pooled_coords(g, 2)
        x, y = g.x_coords(), g.y_coords()
        np.testing.assert_allclose(xc, [(x[2 * i] + x[2 * i + 1]) / 2 for i in range(4)])
        np.testing.assert_allclose(yc, [(y[2 * j] + y[2 * j + 1]) / 2 for j in range(2)])
        # centroid of each 2x2 block equals the mean of its four corner coordinates
        corners = np.array([[x[0], y[0]], [x[1], y[0]], [x[0], y[1]], [x[1], y[1]]])
        np.testing.assert_allclose(corners.mean(axis=0), [xc[0], yc[0]])

    def test_sample_shape_consistency(self):
        rng = np.random.default_rng(6)
        s = pool(field_2d(rng.normal(size=(8, 16))), PoolingSpec("avg", 4), source_id=9)
        assert s.values.shape == (2, 4)
        assert s.coords[0].shape == (4,)
        assert s.coords[1].shape == (2,)
        assert s.source_id == 9
        with pytest.raises(PoolingError):
            PooledSample(s.values, (s.coords[0][:2], s.coords[1]), s.spec)
