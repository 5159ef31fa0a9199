"""Shared minibatch training loop and input normalisation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .errors import TrainingError

log = logging.getLogger(__name__)


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Normalizer":
        x = np.asarray(x, dtype=np.float64)
        return cls(x.mean(axis=0), np.maximum(x.std(axis=0), 1e-6))

    def __call__(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def to_dict(self):
        return {"mean": np.atleast_1d(self.mean).tolist(), "std": np.atleast_1d(self.std).tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"]), np.asarray(d["std"]))


@dataclass
class OptimConfig:
    steps: int = 2000
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    log_every: int = 50


def run(store: ad.ParameterStore, n: int, step_fn: Callable[[np.ndarray, int], tuple[ad.Tensor, dict]],
        cfg: OptimConfig, rng: np.random.Generator) -> list[dict]:
    """Minimise ``step_fn(batch_indices, step)`` with Adam.

    ``step_fn`` returns the scalar loss tensor and a dict of float diagnostics.
    Rows of diagnostics (averaged over ``log_every`` steps) are returned.
    The store's parameters are rolled back to the last finite state before a
    :class:`TrainingError` propagates.
    """
    rows, acc = [], {}
    last_good = store.state_dict()
    order = rng.permutation(n)
    pos = 0
    for step in range(cfg.steps):
        if pos + cfg.batch_size > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + min(cfg.batch_size, n)]
        pos += len(idx)
        store.zero_grad()
        loss, info = step_fn(idx, step)
        try:
            ad.backward(loss)
            ad.adam_step(store, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
        except TrainingError as exc:
            store.load_state_dict(last_good)
            raise TrainingError(f"step {step}: {exc}") from exc
        if step % cfg.log_every == 0:
            last_good = store.state_dict()
        info = {"loss": float(loss.data), **info}
        for k, v in info.items():
            acc.setdefault(k, []).append(v)
        if (step + 1) % cfg.log_every == 0 or step == cfg.steps - 1:
            row = {"step": step + 1, **{k: float(np.mean(v)) for k, v in acc.items()}}
            rows.append(row)
            log.debug("step %d %s", step + 1, row)
            acc = {}
    return rows
