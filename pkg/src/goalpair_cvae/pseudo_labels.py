"""Pseudo-label families over goal-pair candidates and their loss functions.

Three families are provided:

* distance labels, an RBF kernel over the (s_a, s_b) coordinates of pairs;
* marginal labels, indicating that two pairs share agent a's (or b's) goal;
* interaction labels, indicating that two pairs share the value of a
  discrete interaction feature ``h(context, pair)``.

Distance and marginal labels only depend on the candidate set and are
computed once over the full joint set, then gathered per scenario. Interaction
labels depend on the context and are computed per scenario.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError
from .goals import GoalPairSet

FAMILIES = ("distance", "marginal", "interaction")


@dataclass(frozen=True)
class PseudoLabelMatrix:
    family: str
    values: np.ndarray  # (ground truth j, candidate i)
    context_dependent: bool = False


def distance_labels(pairs: GoalPairSet, sigma: float) -> PseudoLabelMatrix:
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    xy = pairs.coordinates
    d2 = ((xy[:, None, :] - xy[None, :, :]) ** 2).sum(-1)
    return PseudoLabelMatrix("distance", np.exp(-d2 / (2.0 * sigma ** 2)))


def marginal_labels(pairs: GoalPairSet) -> tuple[PseudoLabelMatrix, PseudoLabelMatrix]:
    p = pairs.pairs
    a = (p[:, None, 0] == p[None, :, 0]).astype(np.float64)
    b = (p[:, None, 1] == p[None, :, 1]).astype(np.float64)
    return PseudoLabelMatrix("marginal_a", a), PseudoLabelMatrix("marginal_b", b)


# ----------------------------------------------------------------------------
# interaction features


def interaction_feature_displacement(context, goal_a, goal_b):
    """1 if agent a travels strictly further than agent b over the horizon.

    ``context`` is ``[s_a0, v_a0, s_b0, v_b0]`` (or a batch of them); goals
    may be arrays broadcasting against the context's leading dimensions.
    """
    context = np.asarray(context, dtype=np.float64)
    da = context[..., 0] - np.asarray(goal_a)
    db = context[..., 2] - np.asarray(goal_b)
    return (da > db).astype(np.int64)


def _orientation(p, q, r) -> int:
    val = (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
    if abs(val) < 1e-12:
        return 0
    return 1 if val > 0 else -1


def _on_segment(p, q, r) -> bool:
    """Whether collinear point q lies on segment pr."""
    return (min(p[0], r[0]) - 1e-12 <= q[0] <= max(p[0], r[0]) + 1e-12
            and min(p[1], r[1]) - 1e-12 <= q[1] <= max(p[1], r[1]) + 1e-12)


def segments_intersect(seg_a, seg_b) -> bool:
    p1, q1 = np.asarray(seg_a[0], float), np.asarray(seg_a[1], float)
    p2, q2 = np.asarray(seg_b[0], float), np.asarray(seg_b[1], float)
    o1, o2 = _orientation(p1, q1, p2), _orientation(p1, q1, q2)
    o3, o4 = _orientation(p2, q2, p1), _orientation(p2, q2, q1)
    if o1 != o2 and o3 != o4 and 0 not in (o1, o2, o3, o4):
        return True
    # touching / collinear cases, including zero-length segments
    if o1 == 0 and _on_segment(p1, p2, q1):
        return True
    if o2 == 0 and _on_segment(p1, q2, q1):
        return True
    if o3 == 0 and _on_segment(p2, p1, q2):
        return True
    if o4 == 0 and _on_segment(p2, q1, q2):
        return True
    return False


def interaction_feature_segments(seg_a, seg_b) -> tuple[int, int]:
    """(segments intersect, segment a strictly longer than segment b)."""
    la = float(np.linalg.norm(np.subtract(seg_a[1], seg_a[0])))
    lb = float(np.linalg.norm(np.subtract(seg_b[1], seg_b[0])))
    return int(segments_intersect(seg_a, seg_b)), int(la > lb)


def crossing_segments(context, goal_a, goal_b):
    """Embed the two 1D paths as perpendicular lines through the collision point.

    Vehicle a drives along +x, vehicle b along +y, both crossing the origin;
    a displacement ``s`` (distance remaining) maps to coordinate ``-s``.
    """
    seg_a = ((-context[0], 0.0), (-goal_a, 0.0))
    seg_b = ((0.0, -context[2]), (0.0, -goal_b))
    return seg_a, seg_b


def _segments_feature(context, goal_a, goal_b):
    context = np.asarray(context, dtype=np.float64)
    goal_a, goal_b = np.broadcast_arrays(np.asarray(goal_a, float), np.asarray(goal_b, float))
    out = np.empty(goal_a.shape + (2,), dtype=np.int64)
    for idx in np.ndindex(goal_a.shape):
        ctx = context if context.ndim == 1 else context[idx[: context.ndim - 1]]
        out[idx] = interaction_feature_segments(*crossing_segments(ctx, goal_a[idx], goal_b[idx]))
    return out


@dataclass(frozen=True)
class InteractionFeature:
    name: str
    fn: Callable  # (context, goal_a, goal_b) -> discrete values, trailing feature axis optional


FEATURES: dict[str, InteractionFeature] = {}


def register_feature(name: str, fn: Callable) -> InteractionFeature:
    feat = InteractionFeature(name, fn)
    FEATURES[name] = feat
    return feat


register_feature("displacement", interaction_feature_displacement)
register_feature("segments", _segments_feature)


def get_feature(name: str) -> InteractionFeature:
    try:
        return FEATURES[name]
    except KeyError:
        raise ConfigError(f"unknown interaction feature {name!r}; known: {sorted(FEATURES)}") from None


def interaction_labels(context, coords: np.ndarray, feature: InteractionFeature | str, gt_index: int) -> np.ndarray:
    """Binary vector: 1 where candidate ``i`` shares the ground truth's feature value.

    ``coords`` is the ``(P, 2)`` array of candidate goal pairs.
    """
    feature = get_feature(feature) if isinstance(feature, str) else feature
    h = np.asarray(feature.fn(np.asarray(context), coords[:, 0], coords[:, 1]))
    h = h.reshape(len(coords), -1)
    return np.all(h == h[gt_index], axis=1).astype(np.float64)


def interaction_labels_batch(contexts: np.ndarray, coords: np.ndarray, feature: InteractionFeature | str,
                             gt_index: np.ndarray) -> np.ndarray:
    """Batched :func:`interaction_labels`; ``coords`` is ``(B, P, 2)``."""
    feature = get_feature(feature) if isinstance(feature, str) else feature
    B, P = coords.shape[:2]
    h = np.asarray(feature.fn(contexts[:, None, :], coords[..., 0], coords[..., 1])).reshape(B, P, -1)
    gt = h[np.arange(B), gt_index][:, None, :]
    return np.all(h == gt, axis=-1).astype(np.float64)


# ----------------------------------------------------------------------------
# loss functions (all returned as quantities to minimise)


def f_marginal(labels_a, labels_b, decoded, eps: float = ad.EPS) -> ad.Tensor:
    """Negative log-probability of the ground truth's goal under each agent's marginal.

    ``labels_a``/``labels_b`` are the ground truth's rows of the marginal
    label matrices (shape ``(..., P)``); the result is summed over the last axis.
    """
    la = np.asarray(labels_a, dtype=np.float64)
    lb = np.asarray(labels_b, dtype=np.float64)
    decoded = ad.as_tensor(decoded)
    if la.shape != decoded.shape or lb.shape != decoded.shape:
        raise ContractError(f"f_marginal: label shapes {la.shape}/{lb.shape} != decoded {decoded.shape}")
    if not ((la == 1).any(axis=-1).all() and (lb == 1).any(axis=-1).all()):
        raise ContractError("f_marginal: empty positive set")
    mass_a = ad.reduce_sum(decoded * la, axis=-1)
    mass_b = ad.reduce_sum(decoded * lb, axis=-1)
    return -(ad.log(mass_a, eps) + ad.log(mass_b, eps))


def f_interact(labels, decoded, eps: float = ad.EPS) -> ad.Tensor:
    """Sum of ``-log(1 - p_i)`` over negative candidates ``i`` (last axis)."""
    neg = 1.0 - np.asarray(labels, dtype=np.float64)
    decoded = ad.as_tensor(decoded)
    if neg.shape != decoded.shape:
        raise ContractError(f"f_interact: label shape {neg.shape} != decoded {decoded.shape}")
    return -ad.reduce_sum(ad.log(1.0 - decoded, eps) * neg, axis=-1)


def dump_csv(matrix: PseudoLabelMatrix, path) -> None:
    np.savetxt(path, matrix.values, delimiter=",", fmt="%.6g")
