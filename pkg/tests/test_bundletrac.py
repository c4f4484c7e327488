import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from filtrace.bundletrac import (BundleAxisField, BundleConfig, HexKernel, detect_bundle_axis, estimate_orientation,
                                 estimate_shift, longitudinal_average, run_bundletrac, seven_peak_response,
                                 trace_bundle)
from filtrace.metrics import cross_distance
from filtrace.phantom import FilamentTrace, GridSpec, SimulationConfig, simulate_tomogram
from filtrace.synth import hex_bundle, hex_lattice
from filtrace.volgrid import VoxelGrid


def _lines_grid(dims, lines, fwhm=3.0):
    return simulate_tomogram(lines, SimulationConfig(GridSpec(dims), fwhm=fwhm, wedge_half_angle=90))


def _brute_shift(a, b):
    n0, n1 = a.shape
    a = a - a.mean()
    b = b - b.mean()
    best, arg = -np.inf, None
    for s0 in range(n0):
        for s1 in range(n1):
            c = 0.0
            for i in range(n0):
                for j in range(n1):
                    c += a[i, j] * b[(i + s0) % n0, (j + s1) % n1]
            if c > best + 1e-12:
                best, arg = c, (s0, s1)
    return np.array([s if s <= n0 / 2 else s - n for s, n in zip(arg, (n0, n1))], dtype=float)


class TestShift:
    def test_matches_spatial_correlation(self):
        rng = np.random.default_rng(0)
        for _ in range(3):
            a = rng.random((32, 32))
            s = rng.integers(-6, 7, 2)
            b = np.roll(a, s, axis=(0, 1)) + 0.1 * rng.random((32, 32))
            got = estimate_shift(a, b, subpixel=False)
            np.testing.assert_array_equal(got, _brute_shift(a, b))
            np.testing.assert_array_equal(got, s)

    def test_subpixel(self):
        x = np.arange(40)[:, None]
        z = np.arange(40)[None, :]
        g = lambda cx, cz: np.exp(-((x - cx) ** 2 + (z - cz) ** 2) / 8.0)
        s = estimate_shift(g(20, 20), g(21.3, 19.6))
        np.testing.assert_allclose(s, [1.3, -0.4], atol=0.15)

    def test_max_shift_excludes_lattice_jump(self):
        a = np.zeros((40, 40))
        a[10, 10] = a[10, 23] = 1.0
        b = np.roll(a, 13, axis=1)
        b[10, 10] = 0.0
        assert estimate_shift(a, b, subpixel=False, max_shift=6)[1] == 0
        assert estimate_shift(a, b, subpixel=False)[1] == 13


class TestAxis:
    def test_parallel_exact(self):
        lines = [FilamentTrace([[20 + u, 0, 20 + v], [20 + u, 139, 20 + v]]) for u, v in hex_lattice(1, 8.0)]
        field = detect_bundle_axis(_lines_grid((40, 140, 40), lines), slice_stride=55)
        for _, d in field.samples:
            assert tuple(d) == (0.0, 1.0, 0.0)

    def test_sheared(self):
        ny = 170
        lines = [FilamentTrace([[15 + u, 0, 20 + v], [15 + u + ny / 55.0, ny - 1, 20 + v]])
                 for u, v in hex_lattice(1, 8.0)]
        field = detect_bundle_axis(_lines_grid((40, ny, 40), lines), slice_stride=55, max_shift=4)
        for _, d in field.samples:
            shift = d * 55 / d[1]
            assert abs(shift[0] - 1.0) <= 0.5 and abs(shift[2]) <= 0.5

    def test_too_short(self):
        with pytest.raises(ValueError):
            detect_bundle_axis(VoxelGrid(np.zeros((10, 100, 10))), slice_stride=55)

    def test_field_invariants(self):
        f = BundleAxisField([(100.0, [0.2, 1.0, 0.0]), (0.0, [0.0, 2.0, 0.1])])
        d = f.direction_at([-10, 0, 50, 100, 500])
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-9)
        assert np.all(d[:, 1] > 0)
        np.testing.assert_allclose(d[0], d[1])
        with pytest.raises(ValueError):
            BundleAxisField([(0.0, [1.0, -1.0, 0.0])])


class TestAverage:
    def test_constant(self):
        g = VoxelGrid(np.full((6, 40, 6), 2.5))
        out = longitudinal_average(g, BundleAxisField([(0, [0.1, 1, -0.05])]), 5)
        np.testing.assert_allclose(out.data, 2.5)

    @settings(max_examples=15)
    @given(arrays(np.float64, (5, 12, 5), elements=st.floats(-5, 5)),
           arrays(np.float64, (5, 12, 5), elements=st.floats(-5, 5)), st.floats(-3, 3))
    def test_linear(self, a, b, k):
        f = BundleAxisField([(0, [0.2, 1, 0.1])])
        la = longitudinal_average(VoxelGrid(a), f, 3).data
        lb = longitudinal_average(VoxelGrid(b), f, 3).data
        lab = longitudinal_average(VoxelGrid(a + k * b), f, 3).data
        np.testing.assert_allclose(lab, la + k * lb, atol=1e-9)

    def test_variance_reduction(self, rng):
        g = VoxelGrid(rng.standard_normal((30, 200, 30)))
        out = longitudinal_average(g, BundleAxisField.parallel(), 15).data
        ratio = out[:, 15:-15].var() / g.data.var()
        assert ratio == pytest.approx(1 / 31, rel=0.1)

    def test_peak_preserved(self):
        # at a 5-voxel width trilinear sampling of the tilted raster no
        # longer shaves the section maximum
        lines = [FilamentTrace([[10, 0, 10], [14, 99, 10]])]
        g = _lines_grid((25, 100, 20), lines, fwhm=5.0)
        d = np.array([4.0, 99.0, 0.0])
        out = longitudinal_average(g, BundleAxisField([(0, d)]), 15).data
        for y in (30, 50, 70):
            assert out[:, y, :].max() == pytest.approx(g.data[:, y, :].max(), rel=0.05)

    def test_axial_filament_unchanged(self):
        lines = [FilamentTrace([[10, 0, 10], [10, 59, 10]])]
        g = _lines_grid((20, 60, 20), lines)
        out = longitudinal_average(g, BundleAxisField.parallel(), 5).data
        np.testing.assert_allclose(out[:, 10:50], g.data[:, 10:50], atol=1e-9)


def _hex_section(spacing=13.0, orientation=0.0, sigma=2.0, n=80):
    x = np.arange(n)[:, None]
    z = np.arange(n)[None, :]
    sec = np.zeros((n, n))
    for u, v in hex_lattice(3, spacing, orientation):
        sec += np.exp(-((x - 40 - u) ** 2 + (z - 40 - v) ** 2) / (2 * sigma**2))
    return sec


class TestResponse:
    def test_lattice_node_is_argmax(self):
        sec = _hex_section(orientation=0.3)
        k = HexKernel(13.0, orientation=0.3)
        xs = np.arange(25, 56, 0.5)
        best = max((seven_peak_response(sec, k, (a, b)), a, b) for a in xs for b in xs)
        nodes = hex_lattice(1, 13.0, 0.3) + 40
        assert np.min(np.hypot(nodes[:, 0] - best[1], nodes[:, 1] - best[2])) <= 1e-9

    def test_one_peak(self):
        sec = np.random.default_rng(3).random((20, 20))
        k = HexKernel(10.0, sigma=1.5, mode="one")
        c = (9.3, 10.6)
        x, z = np.meshgrid(np.arange(20), np.arange(20), indexing="ij")
        r2 = (x - c[0]) ** 2 + (z - c[1]) ** 2
        w = np.where(r2 <= 4.5**2, np.exp(-r2 / (2 * 1.5**2)), 0.0)
        assert seven_peak_response(sec, k, c) == pytest.approx((w * sec).sum(), rel=1e-12)

    def test_uniform_interior(self):
        k = HexKernel(8.0, sigma=1.3)
        vals = [seven_peak_response(np.ones((60, 60)), k, (c, c)) for c in (25, 30, 32)]
        assert np.ptp(vals) < 1e-12

    def test_collapse_to_seven_times_one_peak(self):
        sec = np.random.default_rng(4).random((30, 30))
        c = (14.37, 15.21)
        one = seven_peak_response(sec, HexKernel(1.0, sigma=2.1, mode="one"), c)
        errs = []
        for s in (1e-2, 1e-3, 1e-4):
            seven = seven_peak_response(sec, HexKernel(s, sigma=2.1), c)
            errs.append(abs(seven - 7 * one))
        # the first-order terms cancel by hexagonal symmetry
        assert errs[2] < 1e-6 * one
        assert errs[1] < errs[0] / 50 and errs[2] < errs[1] / 50

    def test_kernel_validation(self):
        assert HexKernel(12.0).sigma == 2.0
        with pytest.raises(ValueError):
            HexKernel(0.0)
        with pytest.raises(ValueError):
            HexKernel(5.0, mode="three")

    def test_orientation_estimate(self):
        pts = hex_lattice(1, 13.0, 0.4)
        assert estimate_orientation(pts, 13.0) == pytest.approx(0.4, abs=1e-9)
        assert estimate_orientation(pts[:2], 13.0) is None


def _clean_bundle():
    dims = (60, 200, 60)
    truth = hex_bundle(dims, rings=1, spacing=13.0, drift_amplitude=2.0)
    return truth, _lines_grid(dims, truth, fwhm=5.0)


class TestTrace:
    @pytest.mark.parametrize("mode", ["seven", "one"])
    def test_clean_center(self, mode):
        truth, grid = _clean_bundle()
        seed = truth[0].points[np.argmin(np.abs(truth[0].points[:, 1] - 100))]
        (tr,) = run_bundletrac(grid, [seed], BundleConfig(mode=mode))
        y = tr.points[:, 1]
        tx = np.interp(y, truth[0].points[:, 1], truth[0].points[:, 0])
        tz = np.interp(y, truth[0].points[:, 1], truth[0].points[:, 2])
        rms = np.sqrt(np.mean((tr.points[:, 0] - tx) ** 2 + (tr.points[:, 2] - tz) ** 2))
        assert rms <= 0.5
        assert cross_distance(tr, truth[0]) <= 0.5

    def test_markers_monotone(self):
        truth, grid = _clean_bundle()
        seed = [30.0, 103.0, 30.0]
        (tr,) = trace_bundle(grid, [seed], BundleConfig())
        y = tr.points[:, 1]
        steps = np.diff(y)
        assert np.all(steps > 0)
        assert np.all(steps[1:-1] == 15)
        assert y[0] == 0 and y[-1] == 199
        inner = y[(y > 0) & (y < 199)]
        assert np.all((inner - 103) % 15 == 0)

    def test_bad_seed_reported(self):
        truth, grid = _clean_bundle()
        errors = []
        out = trace_bundle(grid, [[-5, 10, 10], [30, 100, 30]], BundleConfig(), errors=errors)
        assert len(out) == 1 and out[0].id == 1
        assert errors == [(0, "seed outside grid")]

    def test_shift_bound_default(self):
        assert BundleConfig().shift_bound() == 6
        assert BundleConfig(spacing=12.0).shift_bound() == 5
        assert BundleConfig(max_shift=3).shift_bound() == 3
