import math

import numpy as np
import pytest

from goalpair_cvae import autodiff as ad
from goalpair_cvae.errors import ConfigError, ContractError
from goalpair_cvae.goals import GoalGrid, GoalPairSet
from goalpair_cvae.pseudo_labels import (
    crossing_segments,
    distance_labels,
    dump_csv,
    f_interact,
    f_marginal,
    get_feature,
    interaction_feature_displacement,
    interaction_feature_segments,
    interaction_labels,
    interaction_labels_batch,
    marginal_labels,
    register_feature,
    segments_intersect,
)


@pytest.fixture
def full():
    g = GoalGrid.uniform(0.0, 16.0, 16)
    return GoalPairSet.full(g, g)


class TestDistance:
    def test_diagonal_and_symmetry(self, full):
        m = distance_labels(full, 1.5)
        np.testing.assert_array_equal(np.diag(m.values), 1.0)
        np.testing.assert_array_equal(m.values, m.values.T)
        assert not m.context_dependent

    def test_rbf_at_two_sigma_squared(self, full):
        # (0,0) and (1,1) are sqrt(2) apart; sigma = 1 gives exp(-1)
        m = distance_labels(full, 1.0)
        assert m.values[full.index_of(0, 0), full.index_of(1, 1)] == pytest.approx(math.exp(-1))

    def test_sigma_positive(self, full):
        with pytest.raises(ConfigError):
            distance_labels(full, 0.0)


class TestMarginal:
    def test_indicators(self, full):
        a, b = marginal_labels(full)
        i, j = full.index_of(3, 5), full.index_of(3, 9)
        assert a.values[i, j] == 1 and b.values[i, j] == 0
        assert a.values[i, i] == 1 and b.values[i, i] == 1

    def test_row_sums(self, full):
        a, b = marginal_labels(full)
        np.testing.assert_array_equal(a.values.sum(1), 16)
        np.testing.assert_array_equal(b.values.sum(1), 16)

    def test_one_hot_loss_zero(self, full):
        a, b = marginal_labels(full)
        j = full.index_of(2, 7)
        p = np.zeros(len(full))
        p[j] = 1
        assert float(f_marginal(a.values[j], b.values[j], p).data) == pytest.approx(0.0, abs=1e-12)

    def test_two_by_two_uniform(self):
        g = GoalGrid.uniform(0, 2, 2)
        s = GoalPairSet.full(g, g)
        a, b = marginal_labels(s)
        for j in range(4):
            assert float(f_marginal(a.values[j], b.values[j], np.full(4, 0.25)).data) == pytest.approx(2 * math.log(2))

    def test_non_negative_and_gradient(self, full, rng):
        a, b = marginal_labels(full)
        j = rng.integers(len(full), size=3)
        logits = rng.normal(size=(3, len(full)))
        x = ad.parameter(logits)
        loss = ad.reduce_sum(f_marginal(a.values[j], b.values[j], ad.softmax(x)))
        assert loss.data >= 0
        ad.backward(loss)
        # mass moves toward the ground truth's row and column
        assert np.all(x.grad[np.arange(3), j] < 0)

    def test_empty_positive_set(self):
        with pytest.raises(ContractError):
            f_marginal(np.zeros(4), np.ones(4), np.full(4, 0.25))


class TestInteractionFeatures:
    def test_tie_is_zero(self):
        assert interaction_feature_displacement([30, 5, 30, 5], -10, -10) == 0

    def test_longer_a(self):
        assert interaction_feature_displacement([30, 5, 30, 5], 0, 20) == 1

    def test_antisymmetry(self, rng):
        for _ in range(50):
            ctx = rng.uniform(-10, 60, size=4)
            ga, gb = rng.uniform(-80, 0, size=2)
            swap = interaction_feature_displacement(ctx[[2, 3, 0, 1]], gb, ga)
            da, db = ctx[0] - ga, ctx[2] - gb
            if da != db:
                assert swap == 1 - interaction_feature_displacement(ctx, ga, gb)

    def test_broadcasting(self):
        ctx = np.array([[30, 5, 30, 5], [10, 5, 40, 5]])
        out = interaction_feature_displacement(ctx[:, None], np.array([[0, -20]]), np.array([[0, 0]]))
        np.testing.assert_array_equal(out, [[0, 1], [0, 0]])

    def test_crossing_segments(self):
        a, b = ((-5.0, 0.0), (5.0, 0.0)), ((0.0, -5.0), (0.0, 5.0))
        assert interaction_feature_segments(a, b) == (1, 0)

    def test_parallel_disjoint(self):
        assert interaction_feature_segments(((0, 0), (3, 0)), ((0, 1), (2, 1))) == (0, 1)

    def test_touching_endpoint(self):
        assert segments_intersect(((0, 0), (1, 0)), ((1, 0), (1, 1)))

    def test_collinear_overlap_and_gap(self):
        assert segments_intersect(((0, 0), (2, 0)), ((1, 0), (3, 0)))
        assert not segments_intersect(((0, 0), (1, 0)), ((2, 0), (3, 0)))

    def test_zero_length_segment(self):
        assert segments_intersect(((1, 0), (1, 0)), ((0, 0), (2, 0)))
        assert not segments_intersect(((1, 1), (1, 1)), ((0, 0), (2, 0)))

    def test_crossing_geometry(self):
        seg_a, seg_b = crossing_segments([20.0, 5.0, 30.0, 5.0], -10.0, 5.0)
        # a crosses the collision point, b stops short of it
        assert interaction_feature_segments(seg_a, seg_b) == (0, 1)
        seg_a, seg_b = crossing_segments([20.0, 5.0, 30.0, 5.0], -10.0, -5.0)
        assert interaction_feature_segments(seg_a, seg_b)[0] == 1

    def test_registry(self):
        assert get_feature("displacement").fn is interaction_feature_displacement
        with pytest.raises(ConfigError):
            get_feature("nope")
        feat = register_feature("always_one", lambda c, a, b: np.ones(np.broadcast(a, b).shape, int))
        assert get_feature("always_one") is feat


class TestInteractionLabels:
    def test_diagonal_is_one(self, full, rng):
        ctx = np.array([40.0, 8.0, 35.0, 9.0])
        coords = full.coordinates - 40
        for j in rng.integers(len(full), size=20):
            lab = interaction_labels(ctx, coords, "displacement", int(j))
            assert lab[j] == 1 and set(np.unique(lab)) <= {0.0, 1.0}

    def test_segments_feature_vector(self, full):
        ctx = np.array([20.0, 5.0, 30.0, 5.0])
        coords = full.coordinates - 8
        lab = interaction_labels(ctx, coords, "segments", 0)
        assert lab[0] == 1

    def test_batch_matches_single(self, rng):
        B, P = 4, 10
        ctx = rng.uniform(20, 60, size=(B, 4))
        coords = rng.uniform(-80, -5, size=(B, P, 2))
        gt = rng.integers(P, size=B)
        batch = interaction_labels_batch(ctx, coords, "displacement", gt)
        for b in range(B):
            np.testing.assert_array_equal(batch[b], interaction_labels(ctx[b], coords[b], "displacement", int(gt[b])))

    def test_f_interact(self):
        labels = np.array([1.0, 0.0, 0.0, 1.0])
        p = np.array([0.4, 0.1, 0.2, 0.3])
        assert float(f_interact(labels, p).data) == pytest.approx(-math.log(0.9) - math.log(0.8))
        assert float(f_interact(np.ones(4), p).data) == 0.0

    def test_f_interact_shape(self):
        with pytest.raises(ContractError):
            f_interact(np.ones(3), np.full(4, 0.25))


def test_dump_csv(tmp_path):
    g = GoalGrid.uniform(0, 2, 2)
    m = distance_labels(GoalPairSet.full(g, g), 1.0)
    dump_csv(m, tmp_path / "d.csv")
    np.testing.assert_allclose(np.loadtxt(tmp_path / "d.csv", delimiter=","), m.values, rtol=1e-5)
