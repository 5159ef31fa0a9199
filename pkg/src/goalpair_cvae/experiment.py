"""Experiment steps shared by the command line and the acceptance suite."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .completion import CompletionNet, future
from .cvae import JointCVAE, prepare
from .goals import top_m_bins
from .marginal import MarginalNet
from .metrics import LatentReport, joint_min_ade, joint_min_fde, latent_diagnostics, majority_assignment
from .selection import select
from .sim import (
    InitDistribution,
    ScenarioArrays,
    ScenarioParams,
    VehicleState,
    generate_dataset,
    right_of_way_probability,
    to_arrays,
)

STRONG_P_RANGE = (0.1, 0.9)
EVAL_FIELDS = ("scenario_id", "variant", "seed", "N", "K", "minADE", "minFDE", "gt_in_candidates")


def strong_interaction_set(n: int, seed: int, params: ScenarioParams = ScenarioParams(),
                           init: InitDistribution = InitDistribution()) -> ScenarioArrays:
    """Scenarios whose right-of-way is genuinely uncertain (p_A within ``STRONG_P_RANGE``)."""
    return to_arrays(generate_dataset(n, init, params, seed=seed, p_range=STRONG_P_RANGE))


def evaluate(cvae: JointCVAE, completion: CompletionNet, marginal: MarginalNet, data: ScenarioArrays, N: int,
             K: int, M: int, seed: int = 0, variant: str = "") -> list[dict]:
    """Per-scenario joint minADE/minFDE of the sample-then-GMM predictions.

    Candidates come from test-time top-M pruning without re-inserting the
    ground truth, so a pruned-out ground truth costs accuracy as it would
    in deployment.
    """
    prep = prepare(data, marginal, M, force_include=False)
    truth = future(data)
    rows = []
    for i in range(len(data)):
        batch = prep.batch(cvae, [i], with_truth=False)
        pred = select(batch, cvae, completion, N, K, seed=seed * 1_000_003 + i)
        in_cand = bool(np.any(prep.cand_a[i] == prep.gt_a[i]) and np.any(prep.cand_b[i] == prep.gt_b[i]))
        rows.append({"scenario_id": i, "variant": variant, "seed": seed, "N": N, "K": K,
                     "minADE": joint_min_ade(pred.trajectories, truth[i]),
                     "minFDE": joint_min_fde(pred.trajectories, truth[i]), "gt_in_candidates": in_cand})
    return rows


def summarize(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if len(v) > 1 else 0.0, "n": int(len(v))}


def analyze_latent(cvae: JointCVAE, marginal: MarginalNet, data: ScenarioArrays, M: int) -> LatentReport:
    prep = prepare(data, marginal, M, force_include=True)
    return latent_diagnostics(cvae, prep.batch(cvae, np.arange(len(data))), data.row_a)


def calibration_conditions(n: int = 20, params: ScenarioParams = ScenarioParams(), v: float = 8.0,
                           s_b: float = 40.0) -> list[tuple[VehicleState, VehicleState]]:
    """``n`` initial conditions whose p_A is evenly spaced over ``STRONG_P_RANGE``.

    Both vehicles drive at ``v``; vehicle A's distance is solved so that its
    headway gap to B produces the target probability.
    """
    out = []
    sign = 1.0 if params.sign_mode == "literal" else -1.0
    for p in np.linspace(*STRONG_P_RANGE, n):
        gap = sign * params.eta * math.atanh(2.0 * p - 1.0)
        out.append((VehicleState(v * (s_b / v + gap), v), VehicleState(s_b, v)))
    return out


@dataclass
class CalibrationResult:
    p_a: np.ndarray
    prior_mass: np.ndarray
    mode_latents: list[int]

    @property
    def errors(self) -> np.ndarray:
        return np.abs(self.prior_mass - self.p_a)


def prior_calibration(cvae: JointCVAE, marginal: MarginalNet, reference: ScenarioArrays, M: int,
                      conditions, params: ScenarioParams = ScenarioParams()) -> CalibrationResult:
    """Prior mass on the A-mode latents versus p_A for fixed initial conditions.

    Latents are mapped to modes by majority vote of the posterior argmax on
    ``reference`` (held-out scenarios with ground truth).
    """
    prep = prepare(reference, marginal, M, force_include=True)
    q = cvae.posterior(prep.batch(cvae, np.arange(len(reference))))
    modes = majority_assignment(q.argmax(axis=1), reference.row_a.astype(int), cvae.d_z)
    contexts = np.array([[a.s, a.v, b.s, b.v] for a, b in conditions])
    ma, mb = marginal.predict_batch(contexts)
    batch = cvae.make_batch(contexts, ma, mb, top_m_bins(ma, M), top_m_bins(mb, M))
    mass = cvae.prior(batch)[:, modes == 1].sum(axis=1)
    p_a = np.array([right_of_way_probability(c, params) for c in conditions])
    return CalibrationResult(p_a, mass, modes.tolist())
