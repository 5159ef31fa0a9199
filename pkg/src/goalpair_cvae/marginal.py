"""Per-agent marginal goal distributions from the initial condition."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import training
from .errors import ContractError, MissingArtifactError
from .goals import GoalGrid, pruning_coverage
from .sim import ScenarioArrays

SWAP = [2, 3, 0, 1]


@dataclass
class MarginalConfig:
    hidden: tuple[int, ...] = (64, 64)
    shared_weights: bool = True
    optim: training.OptimConfig = field(default_factory=lambda: training.OptimConfig(steps=10000, batch_size=128,
                                                                                       lr=3e-3))
    seed: int = 0
    M: int = 8


class MarginalNet:
    """Softmax over each agent's goal grid from ``[s_a0, v_a0, s_b0, v_b0]``.

    With ``shared_weights`` (requires identical grids) agent b is scored by
    the same network applied to the agent-swapped context, so swapping the
    agents swaps the two distributions.
    """

    def __init__(self, grid_a: GoalGrid, grid_b: GoalGrid, normalizer: training.Normalizer,
                 hidden=(64, 64), shared_weights: bool = True, seed: int = 0):
        if shared_weights and not np.array_equal(grid_a.edges, grid_b.edges):
            raise ContractError("shared weights require identical goal grids for both agents")
        self.grid_a, self.grid_b = grid_a, grid_b
        self.normalizer = normalizer
        self.hidden = tuple(hidden)
        self.shared_weights = shared_weights
        self.store = ad.ParameterStore()
        rng = np.random.default_rng(seed)
        self.net_a = ad.MLP(self.store, "a", [4, *hidden, len(grid_a)], rng)
        self.net_b = self.net_a if shared_weights else ad.MLP(self.store, "b", [4, *hidden, len(grid_b)], rng)
        self.trained = False

    def _inputs(self, contexts):
        contexts = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
        return self.normalizer(contexts), self.normalizer(contexts[:, SWAP])

    def logits(self, contexts) -> tuple[ad.Tensor, ad.Tensor]:
        xa, xb = self._inputs(contexts)
        return self.net_a(xa), self.net_b(xb)

    def predict_batch(self, contexts) -> tuple[np.ndarray, np.ndarray]:
        if not self.trained:
            raise ContractError("marginal model has not been trained or loaded")
        la, lb = self.logits(contexts)
        return ad.softmax(la).data, ad.softmax(lb).data

    def predict_marginal(self, context) -> tuple[np.ndarray, np.ndarray]:
        pa, pb = self.predict_batch(np.asarray(context)[None])
        return pa[0], pb[0]

    # persistence ------------------------------------------------------------

    def meta(self) -> dict:
        return {"kind": "marginal", "grid_a": self.grid_a.to_dict(), "grid_b": self.grid_b.to_dict(),
                "normalizer": self.normalizer.to_dict(), "hidden": list(self.hidden),
                "shared_weights": self.shared_weights}

    def save(self, path):
        ad.save_checkpoint(path, {"marginal": self.store}, self.meta())

    @classmethod
    def load(cls, path) -> "MarginalNet":
        if not Path(path).exists():
            raise MissingArtifactError(f"marginal checkpoint not found: {path}")
        groups, meta = ad.load_checkpoint(path)
        net = cls(GoalGrid.from_dict(meta["grid_a"]), GoalGrid.from_dict(meta["grid_b"]),
                  training.Normalizer.from_dict(meta["normalizer"]), meta["hidden"], meta["shared_weights"])
        net.store.load_state_dict(groups["marginal"])
        net.store.freeze()
        net.trained = True
        return net


def ground_truth_bins(data: ScenarioArrays, grid_a: GoalGrid, grid_b: GoalGrid) -> tuple[np.ndarray, np.ndarray]:
    ends = data.endpoints
    return grid_a.discretize(ends[:, 0]), grid_b.discretize(ends[:, 1])


def train_marginal(data: ScenarioArrays, grid_a: GoalGrid, grid_b: GoalGrid,
                   config: MarginalConfig = MarginalConfig()) -> tuple[MarginalNet, list[dict]]:
    """Fit the per-agent cross-entropy to the ground-truth bins.

    Returns the trained network and the training curve rows
    ``(step, loss, coverage)``; coverage is top-M coverage on the batch.
    """
    if len(data) == 0:
        raise ContractError("empty dataset")
    net = MarginalNet(grid_a, grid_b, training.Normalizer.fit(data.contexts), config.hidden,
                      config.shared_weights, config.seed)
    ta, tb = ground_truth_bins(data, grid_a, grid_b)
    M = min(config.M, len(grid_a), len(grid_b))

    def step_fn(idx, step):
        la, lb = net.logits(data.contexts[idx])
        rows = np.arange(len(idx))
        lpa, lpb = ad.log_softmax(la), ad.log_softmax(lb)
        loss = -(lpa[rows, ta[idx]] + lpb[rows, tb[idx]]).mean()
        cov = pruning_coverage(lpa.data, lpb.data, ta[idx], tb[idx], M)
        return loss, {"coverage": cov}

    rows = training.run(net.store, len(data), step_fn, config.optim, np.random.default_rng(config.seed + 1))
    net.store.freeze()
    net.trained = True
    return net, rows
