"""Joint displacement metrics and latent-space diagnostics."""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass

import numpy as np

from .cvae import Batch, JointCVAE
from .errors import ContractError

COLLAPSE_KL = 0.01
COLLAPSE_TV = 0.05


def _check(pred: np.ndarray, truth: np.ndarray):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.ndim == truth.ndim:
        pred = pred[None]
    if pred.shape[1:] != truth.shape:
        raise ContractError(f"hypotheses of shape {pred.shape[1:]} do not match ground truth {truth.shape}")
    return pred, truth


def joint_ade(pred, truth) -> np.ndarray:
    """Per-hypothesis ADE over all steps and both agents; ``pred`` is (K, 2, H)."""
    pred, truth = _check(pred, truth)
    return np.abs(pred - truth[None]).mean(axis=(1, 2))


def joint_fde(pred, truth) -> np.ndarray:
    pred, truth = _check(pred, truth)
    return np.abs(pred[..., -1] - truth[None, :, -1]).mean(axis=1)


def joint_min_ade(pred, truth) -> float:
    return float(joint_ade(pred, truth).min())


def joint_min_fde(pred, truth) -> float:
    return float(joint_fde(pred, truth).min())


# ----------------------------------------------------------------------------
# latent diagnostics


@dataclass
class LatentReport:
    mean_kl: float
    max_tv: float
    purity: float
    mutual_information: float
    mode_latents: list[int]  # majority-vote mode (1 = A has right of way) per latent
    collapsed: bool

    def to_dict(self):
        return asdict(self)


def max_pairwise_tv(decoded: np.ndarray) -> float:
    """Mean over scenarios of the largest TV distance between two latents' decoded distributions."""
    d_z = decoded.shape[1]
    best = np.zeros(decoded.shape[0])
    for i, j in itertools.combinations(range(d_z), 2):
        best = np.maximum(best, 0.5 * np.abs(decoded[:, i] - decoded[:, j]).sum(-1))
    return float(best.mean())


def majority_assignment(latent: np.ndarray, labels: np.ndarray, d_z: int) -> np.ndarray:
    """Mode label per latent by majority vote; ties and unused latents go to mode 0."""
    out = np.zeros(d_z, dtype=int)
    for z in range(d_z):
        sel = labels[latent == z]
        if len(sel):
            out[z] = int(sel.mean() > 0.5)
    return out


def mutual_information(x: np.ndarray, y: np.ndarray) -> float:
    """Plug-in mutual information (nats) between two discrete label arrays."""
    x = np.asarray(x)
    y = np.asarray(y)
    n = len(x)
    mi = 0.0
    for xv in np.unique(x):
        px = np.mean(x == xv)
        for yv in np.unique(y):
            pxy = np.sum((x == xv) & (y == yv)) / n
            if pxy > 0:
                mi += pxy * np.log(pxy / (px * np.mean(y == yv)))
    return float(mi)


def diagnostics_from_arrays(posterior: np.ndarray, prior: np.ndarray, decoded: np.ndarray,
                            row_a: np.ndarray) -> LatentReport:
    """Diagnostics from per-scenario posterior/prior ``(n, d_z)`` and decoded ``(n, d_z, P)``."""
    q = np.asarray(posterior, dtype=np.float64)
    p = np.asarray(prior, dtype=np.float64)
    labels = np.asarray(row_a).astype(int)
    with np.errstate(divide="ignore", invalid="ignore"):
        kl = np.where(q > 0, q * (np.log(q) - np.log(np.maximum(p, 1e-300))), 0.0).sum(axis=1)
    tv = max_pairwise_tv(decoded)
    latent = q.argmax(axis=1)
    assign = majority_assignment(latent, labels, q.shape[1])
    purity = float(np.mean(assign[latent] == labels))
    mean_kl = float(kl.mean())
    return LatentReport(mean_kl, tv, purity, mutual_information(latent, labels), assign.tolist(),
                        mean_kl < COLLAPSE_KL and tv < COLLAPSE_TV)


def latent_diagnostics(model: JointCVAE, batch: Batch, row_a: np.ndarray) -> LatentReport:
    return diagnostics_from_arrays(model.posterior(batch), model.prior(batch), model.decode(batch), row_a)


def prior_mode_mass(model: JointCVAE, batch: Batch, mode_latents) -> np.ndarray:
    """Prior probability of the latents assigned to mode A, per scenario."""
    mask = np.asarray(mode_latents) == 1
    return model.prior(batch)[:, mask].sum(axis=1)


def prior_calibration(model: JointCVAE, batch: Batch, mode_latents, p_a: np.ndarray) -> np.ndarray:
    """|prior mass on the A-mode latents - p_A| per scenario."""
    return np.abs(prior_mode_mass(model, batch, mode_latents) - np.asarray(p_a))
