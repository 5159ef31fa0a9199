"""Goal-conditioned trajectory completion.

Each agent's displacement sequence over the horizon is decoded separately
from the context and that agent's goal. The network predicts the first
``horizon - 1`` steps in per-step standardised units; the last step is set
to the goal, so every completed trajectory ends exactly where it was asked to.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import training
from .errors import ContractError, MissingArtifactError
from .sim import ScenarioArrays

SWAP = [2, 3, 0, 1]


@dataclass
class CompletionConfig:
    hidden: tuple[int, ...] = (64, 64)
    optim: training.OptimConfig = field(default_factory=lambda: training.OptimConfig(steps=4000, batch_size=128,
                                                                                       lr=3e-3))
    seed: int = 0


class CompletionNet:
    def __init__(self, horizon: int, ctx_norm: training.Normalizer, goal_norm: training.Normalizer,
                 step_norm: training.Normalizer, hidden=(64, 64), seed: int = 0):
        if horizon < 2:
            raise ContractError("completion needs a horizon of at least 2 steps")
        self.horizon = horizon
        self.ctx_norm, self.goal_norm, self.step_norm = ctx_norm, goal_norm, step_norm
        self.hidden = tuple(hidden)
        self.store = ad.ParameterStore()
        self.net = ad.MLP(self.store, "traj", [5, *hidden, horizon - 1], np.random.default_rng(seed))
        self.trained = False

    def _inputs(self, contexts, goals):
        """Stack both agents as rows: agent a, then agent b with the context swapped."""
        contexts = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
        goals = np.atleast_2d(np.asarray(goals, dtype=np.float64))
        ctx = np.concatenate([contexts, contexts[:, SWAP]])
        g = np.concatenate([goals[:, 0], goals[:, 1]])
        return np.concatenate([self.ctx_norm(ctx), self.goal_norm(g)[:, None]], axis=1), g

    def forward(self, contexts, goals) -> tuple[ad.Tensor, np.ndarray]:
        """Free steps ``(2B, horizon - 1)`` in metres and the pinned goals ``(2B,)``."""
        x, g = self._inputs(contexts, goals)
        out = self.net(x)
        return out * self.step_norm.std + self.step_norm.mean, g

    def complete_batch(self, contexts, goals) -> np.ndarray:
        """(B, 2, horizon) displacement sequences for steps 1..horizon."""
        if not self.trained:
            raise ContractError("completion model has not been trained or loaded")
        free, g = self.forward(contexts, goals)
        traj = np.concatenate([free.data, g[:, None]], axis=1)
        B = len(traj) // 2
        return np.stack([traj[:B], traj[B:]], axis=1)

    def complete(self, context, goal) -> np.ndarray:
        """(2, horizon) displacements for a single context and goal pair."""
        return self.complete_batch(np.asarray(context)[None], np.asarray(goal)[None])[0]

    def meta(self) -> dict:
        return {"kind": "completion", "horizon": self.horizon, "ctx_norm": self.ctx_norm.to_dict(),
                "goal_norm": self.goal_norm.to_dict(), "step_norm": self.step_norm.to_dict(),
                "hidden": list(self.hidden)}

    def save(self, path):
        ad.save_checkpoint(path, {"completion": self.store}, self.meta())

    @classmethod
    def load(cls, path) -> "CompletionNet":
        if not Path(path).exists():
            raise MissingArtifactError(f"completion checkpoint not found: {path}")
        groups, meta = ad.load_checkpoint(path)
        net = cls(meta["horizon"], training.Normalizer.from_dict(meta["ctx_norm"]),
                  training.Normalizer.from_dict(meta["goal_norm"]), training.Normalizer.from_dict(meta["step_norm"]),
                  meta["hidden"])
        net.store.load_state_dict(groups["completion"])
        net.store.freeze()
        net.trained = True
        return net


def future(data: ScenarioArrays) -> np.ndarray:
    """(n, 2, horizon) ground-truth displacements for steps 1..horizon."""
    return data.trajectories[:, :, 1:]


def straight_line(contexts, goals, horizon: int) -> np.ndarray:
    """Constant-rate interpolation from the initial displacement to the goal."""
    contexts = np.atleast_2d(contexts)
    goals = np.atleast_2d(goals)
    s0 = contexts[:, [0, 2]]
    frac = np.arange(1, horizon + 1) / horizon
    return s0[..., None] + (goals - s0)[..., None] * frac


def per_step_mse(pred: np.ndarray, truth: np.ndarray) -> float:
    return float(np.mean((pred - truth) ** 2))


def train_completion(data: ScenarioArrays, config: CompletionConfig = CompletionConfig()
                     ) -> tuple[CompletionNet, list[dict]]:
    """Fit per-step MSE against ground-truth rollouts, conditioning on true endpoints."""
    if len(data) == 0:
        raise ContractError("empty dataset")
    fut = future(data)
    horizon = fut.shape[-1]
    ctx_all = np.concatenate([data.contexts, data.contexts[:, SWAP]])
    steps_all = np.concatenate([fut[:, 0, :-1], fut[:, 1, :-1]])
    net = CompletionNet(horizon, training.Normalizer.fit(ctx_all), training.Normalizer.fit(fut[:, :, -1].ravel()),
                        training.Normalizer.fit(steps_all), config.hidden, config.seed)
    ends = data.endpoints

    def step_fn(idx, step):
        free, _ = net.forward(data.contexts[idx], ends[idx])
        target = np.concatenate([fut[idx, 0, :-1], fut[idx, 1, :-1]])
        # the pinned final step has zero error, it still counts in the per-step mean
        loss = ad.reduce_sum(ad.square(free - target)) * (1.0 / (target.shape[0] * horizon))
        return loss, {}

    rows = training.run(net.store, len(data), step_fn, config.optim, np.random.default_rng(config.seed + 3))
    net.store.freeze()
    net.trained = True
    return net, rows
