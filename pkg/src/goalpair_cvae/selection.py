"""Goal-pair selection: sample from the joint model, fit a GMM, keep the means."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .completion import CompletionNet
from .cvae import Batch, JointCVAE, sample_goal_pairs
from .errors import ContractError

log = logging.getLogger(__name__)

VAR_FLOOR_CELLS = 1e-4


@dataclass
class GmmModel:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    variances: np.ndarray  # (K, D) diagonal
    log_likelihoods: list[float] = field(default_factory=list)
    requested_k: int = 0

    @property
    def K(self) -> int:
        return len(self.weights)


def _log_gauss(x, means, variances):
    """(N, K) log densities of diagonal Gaussians."""
    diff = x[:, None, :] - means[None]
    return -0.5 * (np.sum(diff ** 2 / variances[None] + np.log(2 * np.pi * variances[None]), axis=-1))


def _kmeans_pp(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, K):
        d2 = np.min(((x[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        if d2.sum() <= 0:
            centers.append(x[rng.integers(len(x))])
        else:
            centers.append(x[rng.choice(len(x), p=d2 / d2.sum())])
    return np.array(centers)


def fit_gmm(samples, K: int, seed: int = 0, cell_size: float = 1.0, tol: float = 1e-6,
            max_iter: int = 200) -> GmmModel:
    """Diagonal-covariance EM with k-means++ initialisation.

    Variances are floored at ``VAR_FLOOR_CELLS * cell_size**2``. If there are
    fewer distinct samples than ``K`` the component count is reduced to the
    number of distinct samples. Components that lose all responsibility are
    re-seeded at the sample farthest from its nearest mean.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if len(x) < 1:
        raise ContractError("fit_gmm needs at least one sample")
    n_distinct = len(np.unique(x, axis=0))
    k = min(K, n_distinct)
    if k < K:
        log.info("reducing GMM components from %d to %d distinct samples", K, k)
    floor = VAR_FLOOR_CELLS * cell_size ** 2
    rng = np.random.default_rng(seed)
    means = _kmeans_pp(x, k, rng)
    variances = np.full_like(means, max(float(x.var(axis=0).mean()), floor))
    weights = np.full(k, 1.0 / k)
    trace = []
    for _ in range(max_iter):
        # E step
        logp = _log_gauss(x, means, variances) + np.log(weights)[None]
        mx = logp.max(axis=1, keepdims=True)
        lse = mx[:, 0] + np.log(np.exp(logp - mx).sum(axis=1))
        ll = float(lse.sum())
        trace.append(ll)
        if len(trace) > 1 and trace[-1] - trace[-2] < tol:
            break
        resp = np.exp(logp - lse[:, None])
        # M step
        nk = resp.sum(axis=0)
        empty = nk < 1e-10
        if empty.any():
            d2 = np.min(((x[:, None, :] - means[None, ~empty]) ** 2).sum(-1), axis=1)
            for j in np.flatnonzero(empty):
                far = int(np.argmax(d2))
                resp[:, j] = 0.0
                resp[far, :] = 0.0
                resp[far, j] = 1.0
                d2[far] = -1.0
            nk = resp.sum(axis=0)
        weights = nk / nk.sum()
        means = (resp.T @ x) / nk[:, None]
        variances = np.maximum((resp.T @ x ** 2) / nk[:, None] - means ** 2, floor)
    return GmmModel(weights, means, variances, trace, requested_k=K)


@dataclass
class PredictionSet:
    pairs: np.ndarray  # (K, 2) goal-pair coordinates (snapped to candidates)
    probabilities: np.ndarray  # (K,)
    trajectories: np.ndarray | None = None  # (K, 2, horizon)


def snap_to_candidates(means: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Index of the nearest candidate pair for each mean."""
    d2 = ((means[:, None, :] - coords[None]) ** 2).sum(-1)
    return d2.argmin(axis=1)


def select(batch: Batch, cvae: JointCVAE, completion: CompletionNet | None, N: int, K: int,
           seed: int = 0) -> PredictionSet:
    """Sample ``N`` goal pairs for one scenario, fit a ``K``-component GMM and complete trajectories."""
    rng = np.random.default_rng(seed)
    idx, _ = sample_goal_pairs(cvae, batch, N, rng)
    if len(idx) == 0:
        raise ContractError("goal selection needs N >= 1 samples")
    coords = batch.coords[0]
    gmm = fit_gmm(coords[idx], K, seed=seed, cell_size=cvae.grid_a.width)
    snapped = coords[snap_to_candidates(gmm.means, coords)]
    traj = None
    if completion is not None:
        traj = completion.complete_batch(np.repeat(batch.raw_ctx, len(snapped), axis=0), snapped)
    return PredictionSet(snapped, gmm.weights, traj)
