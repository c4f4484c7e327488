import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from filtrace.dpcore import (BlendMode, NotTraceable, PyramidSpec, blend, brute_force_path_density,
                             enhance_map, path_density, path_density_map, trace_paths)
from filtrace.volgrid import VoxelGrid

unit = st.floats(0.0, 1.0, allow_nan=False, width=32)


class TestPyramidSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            PyramidSpec(1, 1, 0)
        with pytest.raises(ValueError):
            PyramidSpec("w", 1, 3)
        with pytest.raises(ValueError):
            PyramidSpec(0, 2, 3)
        assert PyramidSpec("Z", -1, 2).axis == 2
        assert PyramidSpec(0, 1, 3).reversed() == PyramidSpec(0, -1, 3)


class TestPathDensity:
    def test_all_ones(self):
        res = path_density(np.ones((7, 7, 7)), (3, 1, 3), PyramidSpec(1, 1, 2))
        assert res.value == 3.0 and res.endpoint[1] == 3

    def test_all_zeros(self):
        assert path_density(np.zeros((5, 5, 5)), (2, 0, 2), PyramidSpec(1, 1, 3)).value == 0.0

    def test_tie_break_lexicographic(self):
        # uniform grid: every base voxel ties, smallest lateral index wins
        res = path_density(np.ones((9, 9, 9)), (4, 4, 4), PyramidSpec(1, 1, 2))
        assert res.endpoint == (2, 6, 2)

    def test_errors(self):
        with pytest.raises(IndexError):
            path_density(np.zeros((4, 4, 4)), (4, 0, 0), PyramidSpec(0, 1, 1))
        with pytest.raises(NotTraceable):
            path_density(np.zeros((4, 4, 4)), (1, 2, 1), PyramidSpec(1, 1, 2))
        with pytest.raises(NotTraceable):
            brute_force_path_density(np.zeros((4, 4, 4)), (1, 1, 1), PyramidSpec(1, -1, 2))

    def test_brute_force_refuses_long(self):
        with pytest.raises(ValueError):
            brute_force_path_density(np.zeros((20, 20, 20)), (10, 0, 10), PyramidSpec(1, 1, 7))

    def test_straight_line(self):
        d = np.zeros((9, 9, 9))
        d[4, :, 6] = 0.5
        spec = PyramidSpec(1, 1, 4)
        assert brute_force_path_density(d, (4, 2, 6), spec) == pytest.approx(2.5)
        res = path_density(d, (4, 2, 6), spec, with_path=True)
        assert res.value == pytest.approx(2.5)
        np.testing.assert_array_equal(res.path[:, 1], np.arange(2, 7))
        assert np.all(res.path[:, 0] == 4) and np.all(res.path[:, 2] == 6)

    def test_single_step(self, rng):
        d = rng.random((5, 5, 5))
        base = d[1:4, 3, 1:4]
        assert brute_force_path_density(d, (2, 2, 2), PyramidSpec(1, 1, 1)) == pytest.approx(d[2, 2, 2] + base.max())

    def test_matches_brute_force_random(self):
        rng = np.random.default_rng(7)
        for trial in range(100):
            d = rng.random((9, 9, 9))
            axis = trial % 3
            sign = 1 if trial % 2 else -1
            spec = PyramidSpec(axis, sign, 4)
            origins = [o for o in itertools.product(range(1, 8), repeat=3)
                       if 0 <= o[axis] + sign * 4 < 9]
            sample = [origins[i] for i in rng.choice(len(origins), 6, replace=False)]
            vals, _, _ = trace_paths(d, sample, spec)
            pmap = path_density_map(d, spec)
            for o, v in zip(sample, vals):
                bf = brute_force_path_density(d, o, spec)
                assert abs(v - bf) <= 1e-12
                assert abs(pmap[o] - bf) <= 1e-12

    @settings(max_examples=25)
    @given(arrays(np.float64, (6, 6, 6), elements=unit), st.integers(0, 2), st.sampled_from([1, -1]),
           st.integers(1, 3), st.tuples(st.integers(0, 5), st.integers(0, 5), st.integers(0, 5)))
    def test_brute_force_property(self, d, axis, sign, l, origin):
        spec = PyramidSpec(axis, sign, l)
        if not 0 <= origin[axis] + sign * l < 6:
            return
        res = path_density(d, origin, spec, with_path=True)
        assert abs(res.value - brute_force_path_density(d, origin, spec)) <= 1e-12
        # endpoint containment and realized path sums to the value
        end = np.array(res.endpoint)
        assert end[axis] == origin[axis] + sign * l
        assert np.abs(end - origin).max() <= l
        assert d[tuple(res.path.T)].sum() == pytest.approx(res.value, abs=1e-12)
        assert np.all(np.abs(np.diff(res.path, axis=0)).max(axis=1) == 1)
        assert 0.0 <= res.value <= l + 1

    @settings(max_examples=25)
    @given(arrays(np.float64, (6, 6, 6), elements=unit), arrays(np.float64, (6, 6, 6), elements=unit))
    def test_monotone(self, d, extra):
        spec = PyramidSpec(2, 1, 3)
        a = path_density_map(d, spec)
        b = path_density_map(d + extra, spec)
        ok = ~np.isnan(a)
        assert np.all(b[ok] >= a[ok] - 1e-12)

    def test_map_boundary_nan(self):
        m = path_density_map(np.ones((5, 8, 5)), PyramidSpec(1, -1, 3))
        assert np.isnan(m[:, :3]).all() and not np.isnan(m[:, 3:]).any()

    @pytest.mark.parametrize("threads", [2, 3])
    def test_map_threads_identical(self, rng, threads):
        d = rng.random((30, 40, 20))
        spec = PyramidSpec(1, 1, 5)
        assert np.array_equal(path_density_map(d, spec), path_density_map(d, spec, threads=threads),
                              equal_nan=True)


class TestBlend:
    @pytest.mark.parametrize("x", [0.0, 0.3, 2.0])
    def test_symmetric_inputs(self, x):
        assert blend(x, x, "multiply") == pytest.approx(x * x)
        assert blend(x, x, "add") == pytest.approx(2 * x)
        assert blend(x, x, "geometric_mean") == pytest.approx(x)
        assert blend(x, x, "minimum") == x

    def test_zero_absorbing(self):
        for mode in ("multiply", "geometric_mean", "minimum"):
            assert blend(0.0, 4.0, mode) == 0.0

    def test_arithmetic(self):
        assert blend(3, 5, "add") == 8 and blend(3, 5, "minimum") == 3
        assert blend(3, 5, "geometric_mean") == pytest.approx(np.sqrt(15))

    def test_parse(self):
        assert BlendMode.parse("MUL") is BlendMode.MULTIPLY
        with pytest.raises(ValueError):
            BlendMode.parse("median")

    @given(st.floats(0, 100), st.floats(0, 100))
    def test_properties(self, f, b):
        assert blend(f, b, "multiply") == blend(b, f, "multiply")
        assert blend(f, b, "add") == pytest.approx(2 * (f + b) / 2)
        assert blend(f, b, "geometric_mean") ** 2 == pytest.approx(blend(f, b, "multiply"), rel=1e-12, abs=1e-12)


class TestEnhance:
    def test_uniform_interior(self):
        out = enhance_map(VoxelGrid(np.ones((12, 12, 12))), l=3).data
        interior = out[:, 3:9, :]
        assert np.allclose(interior, interior.flat[0])

    def test_line_filament(self):
        d = np.zeros((15, 30, 15))
        d[7, :, 7] = 1.0
        out = enhance_map(VoxelGrid(d), l=5, mode="multiply", axis="y").data
        assert out.min() == 0.0 and out.max() == 1.0
        np.testing.assert_allclose(out[7, 5:25, 7], 1.0)
        off = out.copy()
        off[7, :, 7] = 0
        assert off.max() < 1.0
        # boundary voxels with a base outside the grid are zero
        assert np.all(out[:, :5] == 0) and np.all(out[:, 25:] == 0)

    def test_flat_input(self):
        out = enhance_map(VoxelGrid(np.zeros((8, 8, 8))), l=2).data
        assert not out.any()
