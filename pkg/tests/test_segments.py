import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from filtrace.segments import (Cfs, angle_between, canonical_order, end_tangent, polyline_length, select_seeds,
                               smooth_centerline)
from filtrace.volgrid import VoxelGrid


def _seed_oracle(d, n):
    out = []
    for i, j, k in itertools.product(*(range(0, s, n) for s in d.shape)):
        block = d[i : i + n, j : j + n, k : k + n]
        best = None
        for a, b, c in itertools.product(*(range(s) for s in block.shape)):
            if best is None or block[a, b, c] > block[best]:
                best = (a, b, c)
        out.append((i + best[0], j + best[1], k + best[2]))
    return sorted(out)


class TestSelectSeeds:
    def test_count(self):
        assert len(select_seeds(VoxelGrid(np.zeros((10, 10, 10))), 5)) == 8

    def test_truncated_edges(self):
        assert len(select_seeds(np.zeros((11, 10, 3)), 5)) == 3 * 2 * 1

    def test_unique_maxima(self):
        d = np.zeros((10, 10, 10))
        peaks = [(1, 2, 3), (7, 1, 4), (2, 8, 0), (9, 9, 9)]
        for p in peaks:
            d[p] = 1.0
        seeds = {tuple(s) for s in select_seeds(d, 5)}
        assert set(peaks) <= seeds

    def test_tie_lexicographic(self):
        seeds = select_seeds(np.ones((4, 4, 4)), 2)
        assert all(tuple(s % 2) == (0, 0, 0) for s in seeds)

    @pytest.mark.parametrize("n", [3, 4, 5])
    def test_matches_scan_oracle(self, n):
        d = np.random.default_rng(n).random((15, 13, 11))
        got = [tuple(s) for s in select_seeds(d, n)]
        assert got == _seed_oracle(d, n)

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            select_seeds(np.zeros((3, 3, 3)), 0)


class TestCfs:
    def test_midpoint_rounds_half_up(self):
        c = Cfs([0, 0, 0], [1, 5, 2], 0.5, 1)
        assert tuple(c.midpoint) == (1, 3, 1)
        assert c.axial_extent == 5

    def test_canonical_order_permutation_free(self):
        cs = [Cfs([i, 0, 0], [i, 5, 1], 0.1 * i, 1) for i in range(5)]
        ref = [c.key() for c in canonical_order(cs)]
        for perm in itertools.permutations(cs):
            assert [c.key() for c in canonical_order(perm)] == ref


class TestGeometry:
    def test_angles(self):
        assert angle_between([1, 0, 0], [0, 1, 0]) == pytest.approx(90)
        assert angle_between([1, 0, 0], [-1, 0, 0]) == pytest.approx(180)
        assert angle_between([1, 0, 0], [-1, 0, 0], unsigned=True) == pytest.approx(0)
        assert angle_between([0, 0, 0], [1, 0, 0]) == 0.0

    def test_polyline_length(self):
        assert polyline_length([[0, 0, 0], [3, 4, 0], [3, 4, 2]]) == pytest.approx(7)
        assert polyline_length([[1, 1, 1]]) == 0.0

    def test_smooth_straight_line(self):
        pts = np.array([[0, 0, 0], [0, 20, 10]], dtype=float)
        out = smooth_centerline(pts)
        np.testing.assert_allclose(out[[0, -1]], pts)
        assert len(out) == 2

    def test_smooth_reduces_zigzag(self):
        y = np.arange(30.0)
        pts = np.stack([np.where(np.arange(30) % 2, 1.0, 0.0), y, np.zeros(30)], axis=1)
        out = smooth_centerline(pts)
        assert np.ptp(out[1:-1, 0]) < 0.5
        assert polyline_length(out) < polyline_length(pts)

    def test_end_tangent(self):
        pts = np.array([[0, 0, 0], [0, 10, 0], [3, 14, 0]], dtype=float)
        np.testing.assert_allclose(end_tangent(pts, True), [0.6, 0.8, 0])
        np.testing.assert_allclose(end_tangent(pts, False), [0, -1, 0])

    @given(st.lists(st.tuples(*[st.integers(-20, 20)] * 3), min_size=2, max_size=15))
    def test_smooth_keeps_endpoints(self, pts):
        pts = np.array(pts, dtype=float)
        if np.allclose(pts, pts[0]):
            return
        out = smooth_centerline(pts)
        assert np.all(np.isfinite(out))
        # endpoints survive up to the dropping of leading/trailing duplicates
        first = pts[np.flatnonzero(np.any(pts != pts[0], axis=1))[0] - 1]
        np.testing.assert_allclose(out[0], first)
        np.testing.assert_allclose(out[-1], pts[-1], atol=1e-9)
