import itertools
import math

import numpy as np
import pytest

from goalpair_cvae.errors import ContractError
from goalpair_cvae.metrics import (
    diagnostics_from_arrays,
    joint_ade,
    joint_fde,
    joint_min_ade,
    joint_min_fde,
    majority_assignment,
    max_pairwise_tv,
    mutual_information,
)
from goalpair_cvae.selection import VAR_FLOOR_CELLS, fit_gmm, snap_to_candidates


class TestGmm:
    def test_identical_samples(self):
        g = fit_gmm(np.tile([[-30.0, -10.0]], (20, 1)), 1, cell_size=4.5)
        np.testing.assert_allclose(g.means, [[-30.0, -10.0]])
        assert g.weights[0] == pytest.approx(1.0)
        np.testing.assert_allclose(g.variances, VAR_FLOOR_CELLS * 4.5 ** 2)

    def test_k_reduced_to_distinct(self):
        g = fit_gmm(np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]]), 5)
        assert g.K == 2 and g.requested_k == 5

    def test_no_samples(self):
        with pytest.raises(ContractError):
            fit_gmm(np.zeros((0, 2)), 2)

    @pytest.mark.parametrize("trial", range(50))
    def test_planted_mixture_and_monotone_ll(self, trial):
        rng = np.random.default_rng(trial)
        cell = 4.5
        centers = rng.uniform(-80, -10, size=(2, 2))
        while np.linalg.norm(centers[0] - centers[1]) < 6 * cell:
            centers = rng.uniform(-80, -10, size=(2, 2))
        n = 1000
        x = np.concatenate([rng.normal(c, 0.5 * cell, size=(n, 2)) for c in centers])
        g = fit_gmm(x, 2, seed=trial, cell_size=cell)
        assert np.all(np.diff(g.log_likelihoods) >= -1e-9)
        np.testing.assert_allclose(g.weights.sum(), 1.0)
        # compare with the planted means, matched by nearest
        err = min(np.abs(g.means - centers).max(), np.abs(g.means[::-1] - centers).max())
        # sample-mean noise is 0.5 cell / sqrt(1000) ~ 0.016 cell per coordinate
        assert err / cell < 0.1

    def test_deterministic(self, rng):
        x = rng.normal(size=(60, 2))
        a, b = fit_gmm(x, 3, seed=7), fit_gmm(x, 3, seed=7)
        np.testing.assert_array_equal(a.means, b.means)

    def test_n_equals_k_recovers_samples(self, rng):
        x = rng.uniform(-50, 0, size=(4, 2))
        g = fit_gmm(x, 4, cell_size=4.5)
        d = np.abs(g.means[:, None] - x[None]).sum(-1).min(axis=1)
        assert np.all(d < 1e-6)

    def test_snap(self):
        coords = np.array([[0.0, 0.0], [5.0, 5.0], [10.0, 0.0]])
        np.testing.assert_array_equal(snap_to_candidates(np.array([[6.0, 4.0], [9.0, 1.0]]), coords), [1, 2])


def brute_min_ade(pred, truth):
    best = math.inf
    for k in range(len(pred)):
        total = 0.0
        for agent in range(2):
            for t in range(truth.shape[1]):
                total += abs(pred[k][agent][t] - truth[agent][t])
        best = min(best, total / (2 * truth.shape[1]))
    return best


def brute_min_fde(pred, truth):
    return min((abs(p[0][-1] - truth[0][-1]) + abs(p[1][-1] - truth[1][-1])) / 2 for p in pred)


class TestDisplacementMetrics:
    def test_exact_hypothesis(self, rng):
        truth = rng.normal(size=(2, 20))
        pred = np.stack([truth + 1, truth])
        assert joint_min_ade(pred, truth) == 0.0 and joint_min_fde(pred, truth) == 0.0

    def test_constant_offset(self, rng):
        truth = rng.normal(size=(2, 20))
        assert joint_min_ade(truth + 0.7, truth) == pytest.approx(0.7)
        assert joint_min_fde(truth + 0.7, truth) == pytest.approx(0.7)

    @pytest.mark.parametrize("seed", range(5))
    def test_brute_force(self, seed):
        r = np.random.default_rng(seed)
        truth = r.normal(size=(2, 20))
        pred = r.normal(size=(3, 2, 20))
        assert joint_min_ade(pred, truth) == pytest.approx(brute_min_ade(pred.tolist(), truth))
        assert joint_min_fde(pred, truth) == pytest.approx(brute_min_fde(pred.tolist(), truth.tolist()))

    def test_nested_hypotheses_monotone(self, rng):
        truth = rng.normal(size=(2, 20))
        pred = rng.normal(size=(6, 2, 20))
        ade = [joint_min_ade(pred[:k], truth) for k in range(1, 7)]
        fde = [joint_min_fde(pred[:k], truth) for k in range(1, 7)]
        assert all(b <= a for a, b in zip(ade, ade[1:]))
        assert all(b <= a for a, b in zip(fde, fde[1:]))

    def test_horizon_mismatch(self):
        with pytest.raises(ContractError):
            joint_ade(np.zeros((2, 2, 19)), np.zeros((2, 20)))
        assert joint_fde(np.zeros((2, 20)), np.ones((2, 20)))[0] == 1.0


class TestLatentDiagnostics:
    def test_decoder_ignores_z(self, rng):
        n = 1000
        dec = np.tile(rng.dirichlet(np.ones(8)), (n, 2, 1))
        q = np.full((n, 2), 0.5)
        labels = np.arange(n) % 2
        rep = diagnostics_from_arrays(q, q, dec, labels)
        assert rep.max_tv == 0.0 and rep.purity == 0.5 and rep.mutual_information == 0.0
        assert rep.mean_kl == 0.0 and rep.collapsed

    def test_perfect_separation(self):
        n = 100
        labels = np.arange(n) % 2
        q = np.eye(2)[1 - labels]  # latent 0 <-> mode A
        dec = np.zeros((n, 2, 4))
        dec[:, 0, :2] = 0.5
        dec[:, 1, 2:] = 0.5
        rep = diagnostics_from_arrays(q, np.full((n, 2), 0.5), dec, labels)
        assert rep.purity == 1.0
        assert rep.mutual_information == pytest.approx(math.log(2))
        assert rep.mode_latents == [1, 0]
        assert rep.max_tv == pytest.approx(1.0)
        assert not rep.collapsed

    def test_purity_invariant_to_relabeling(self, rng):
        n = 300
        labels = rng.integers(0, 2, n)
        q = rng.dirichlet(np.ones(3), n)
        dec = rng.dirichlet(np.ones(5), (n, 3))
        a = diagnostics_from_arrays(q, q, dec, labels)
        perm = [2, 0, 1]
        b = diagnostics_from_arrays(q[:, perm], q[:, perm], dec[:, perm], labels)
        assert a.purity == pytest.approx(b.purity)
        assert a.mutual_information == pytest.approx(b.mutual_information)

    def test_mutual_information_against_formula(self, rng):
        x = rng.integers(0, 3, 500)
        y = rng.integers(0, 2, 500)
        joint = np.zeros((3, 2))
        np.add.at(joint, (x, y), 1)
        joint /= joint.sum()
        px, py = joint.sum(1, keepdims=True), joint.sum(0, keepdims=True)
        nz = joint > 0
        expected = (joint[nz] * np.log(joint[nz] / (px @ py)[nz])).sum()
        assert mutual_information(x, y) == pytest.approx(expected)

    def test_max_tv(self):
        dec = np.array([[[1.0, 0, 0], [0, 1.0, 0], [0.5, 0.5, 0]]])
        assert max_pairwise_tv(dec) == pytest.approx(1.0)

    def test_majority(self):
        np.testing.assert_array_equal(majority_assignment(np.array([0, 0, 1, 1, 1]), np.array([1, 1, 0, 0, 1]), 3),
                                      [1, 0, 0])
