import numpy as np
import pytest

from goalpair_cvae.errors import ConfigError
from goalpair_cvae.goals import (
    GoalGrid,
    GoalPairSet,
    discretize,
    pruning_coverage,
    top_m_bins,
    top_m_prune,
)


@pytest.fixture
def grid():
    return GoalGrid.uniform(0.0, 16.0, 16)


class TestGrid:
    def test_centers_and_width(self, grid):
        assert len(grid) == 16
        assert grid.width == pytest.approx(1.0)
        assert grid.centers[0] == 0.5 and grid.centers[-1] == 15.5

    def test_discretize_nearest_center(self, grid):
        assert discretize(3.2, grid) == 3
        assert discretize(3.9, grid) == 3
        assert discretize(4.01, grid) == 4

    def test_boundary_tie_goes_to_lower_bin(self, grid):
        # 4.0 is equidistant from centers 3.5 and 4.5
        assert grid.discretize(4.0) == 3

    def test_out_of_range_clamps(self, grid):
        assert grid.discretize(-100.0) == 0
        assert grid.discretize(100.0) == 15

    def test_vectorised(self, grid):
        np.testing.assert_array_equal(grid.discretize(np.array([0.1, 7.7, 20.0])), [0, 7, 15])

    def test_covering_spans_values(self):
        vals = np.array([-80.9, -30.0, -8.87])
        g = GoalGrid.covering(vals, 16)
        assert g.edges[0] == pytest.approx(-80.9) and g.edges[-1] == pytest.approx(-8.87)
        assert g.width == pytest.approx((80.9 - 8.87) / 16)

    def test_covering_degenerate_values(self):
        g = GoalGrid.covering(np.array([2.0, 2.0]), 4)
        assert g.edges[0] < 2.0 < g.edges[-1]

    def test_roundtrip(self, grid):
        back = GoalGrid.from_dict(grid.to_dict())
        np.testing.assert_array_equal(back.edges, grid.edges)

    @pytest.mark.parametrize("edges", [[0.0], [0.0, 0.0], [1.0, 0.5]])
    def test_invalid_edges(self, edges):
        with pytest.raises(ConfigError):
            GoalGrid(np.array(edges))

    def test_zero_bins(self):
        with pytest.raises(ConfigError):
            GoalGrid.uniform(0, 1, 0)


class TestPairSet:
    def test_full_size_and_order(self, grid):
        full = GoalPairSet.full(grid, grid)
        assert len(full) == 256
        pairs = full.pairs
        np.testing.assert_array_equal(pairs[:3], [[0, 0], [0, 1], [0, 2]])
        np.testing.assert_array_equal(pairs[16], [1, 0])

    def test_coordinates(self, grid):
        full = GoalPairSet.full(grid, grid)
        np.testing.assert_allclose(full.coordinates[17], [1.5, 1.5])

    def test_index_of(self, grid):
        s = GoalPairSet(grid, grid, np.array([2, 5, 9]), np.array([1, 4]))
        assert s.index_of(5, 4) == 3
        assert s.index_of(3, 4) is None
        np.testing.assert_array_equal(s.pairs[s.index_of(9, 1)], [9, 1])


class TestPruning:
    def test_top_m_sorted_and_tie_break(self):
        m = np.array([0.1, 0.3, 0.1, 0.3, 0.2])
        np.testing.assert_array_equal(top_m_bins(m, 3), [1, 3, 4])
        np.testing.assert_array_equal(top_m_bins(m, 4), [0, 1, 3, 4])

    def test_prune_gives_m_squared(self, grid, rng):
        ma, mb = rng.dirichlet(np.ones(16)), rng.dirichlet(np.ones(16))
        s = top_m_prune(ma, mb, 8, grid, grid)
        assert len(s) == 64
        assert len(s.coordinates) == 64

    def test_full_m_keeps_everything(self, grid, rng):
        s = top_m_prune(rng.dirichlet(np.ones(16)), rng.dirichlet(np.ones(16)), 16, grid, grid)
        assert len(s) == 256

    @pytest.mark.parametrize("M", [0, -1, 17])
    def test_invalid_m(self, M):
        with pytest.raises(ConfigError):
            top_m_bins(np.ones(16) / 16, M)

    def test_coverage(self):
        ma = np.array([[0.7, 0.2, 0.1], [0.1, 0.2, 0.7]])
        mb = np.array([[0.6, 0.3, 0.1], [0.6, 0.3, 0.1]])
        assert pruning_coverage(ma, mb, np.array([0, 0]), np.array([1, 0]), 2) == 0.5
        assert pruning_coverage(ma, mb, np.array([0, 0]), np.array([1, 0]), 3) == 1.0

    def test_coverage_monotone_in_m(self, rng):
        ma = rng.dirichlet(np.ones(16), size=200)
        mb = rng.dirichlet(np.ones(16), size=200)
        ta, tb = rng.integers(16, size=200), rng.integers(16, size=200)
        cov = [pruning_coverage(ma, mb, ta, tb, M) for M in range(1, 17)]
        assert all(b >= a for a, b in zip(cov, cov[1:]))
        assert cov[-1] == 1.0
