"""Clustering view of the reconstruction loss at zero KL weight.

With ``beta = 0`` each goal pair's posterior puts all its mass on one latent,
so training amounts to partitioning the goal pairs into ``d_z`` subgroups and
fitting one distribution per subgroup. Given pair counts ``n_j`` the best
per-subgroup BCE has a closed form, and the total is
``sum_k sum_{j in S_k} (n_j - n_S) log(1 - n_j / n_S) - n_j log(n_j / n_S)``.

This module evaluates that objective, checks it numerically against a
direct minimisation of the BCE, and searches all clusterings of small
instances exhaustively.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError

MAX_SEARCH_PAIRS = 16
_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def _xlogy(x, y):
    """x * log(y) with the 0 * log(0) = 0 convention."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    safe = np.where(x == 0, 1.0, y)
    return np.where(x == 0, 0.0, x * np.log(safe))


def _validate_counts(counts) -> np.ndarray:
    n = np.asarray(counts, dtype=np.float64)
    if n.ndim != 1 or np.any(n < 0) or np.any(n != np.round(n)):
        raise ContractError("counts must be a 1-D vector of non-negative integers")
    return n


def clustering_objective(counts, assignment) -> float:
    n = _validate_counts(counts)
    assignment = np.asarray(assignment)
    if assignment.shape != n.shape:
        raise ContractError(f"assignment shape {assignment.shape} != counts shape {n.shape}")
    total = 0.0
    for k in np.unique(assignment):
        nj = n[assignment == k]
        ns = nj.sum()
        if ns == 0:
            continue
        frac = nj / ns
        total += float(np.sum(-_xlogy(ns - nj, 1.0 - frac) - _xlogy(nj, frac)))
    return total


def golden_section(f, lo: float = 0.0, hi: float = 1.0, tol: float = 1e-12, max_iter: int = 200) -> float:
    """Minimiser of a unimodal scalar function on ``[lo, hi]``."""
    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a < tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    # the optimum may sit on the boundary
    return min((lo, hi, x), key=f)


@dataclass(frozen=True)
class SubgroupFit:
    probabilities: np.ndarray  # numerically optimal per-pair probabilities
    closed_form: np.ndarray  # n_j / n_S
    min_bce: float


def _bce_sum(n_pos: float, n_neg: float, p: float) -> float:
    """BCE of ``n_pos`` positive and ``n_neg`` negative labels at probability ``p``."""
    total = 0.0
    if n_pos:
        total += -n_pos * math.log(p) if p > 0 else math.inf
    if n_neg:
        total += -n_neg * math.log1p(-p) if p < 1 else math.inf
    return total


def brute_force_min_bce(counts, subgroup) -> SubgroupFit:
    """Minimise the summed BCE of all dataset instances within a subgroup.

    Every instance of pair ``j`` is a one-hot label over the subgroup; the
    loss separates per coordinate, so each probability is found by golden
    section search independently of the closed form.
    """
    n = _validate_counts(counts)
    members = np.atleast_1d(np.asarray(subgroup, dtype=int))
    if len(members) == 0:
        raise ContractError("subgroup must be non-empty")
    nj = n[members]
    ns = float(nj.sum())
    probs = np.empty(len(members))
    value = 0.0
    for i, cnt in enumerate(nj):
        p = golden_section(lambda x, c=cnt: _bce_sum(c, ns - c, x))
        probs[i] = p
        value += _bce_sum(cnt, ns - cnt, p)
    closed = nj / ns if ns > 0 else np.zeros_like(nj)
    return SubgroupFit(probs, closed, value)


def brute_force_objective(counts, assignment) -> float:
    assignment = np.asarray(assignment)
    return sum(brute_force_min_bce(counts, np.flatnonzero(assignment == k)).min_bce
               for k in np.unique(assignment))


@dataclass(frozen=True)
class SearchResult:
    assignment: np.ndarray  # subgroup per pair; unsupported pairs get -1
    objective: float
    all_in_one: float
    n_evaluated: int


def exhaustive_clustering_search(counts, d_z: int) -> SearchResult:
    """Exact minimiser of :func:`clustering_objective` over all clusterings.

    Unsupported pairs (``n_j = 0``) contribute nothing anywhere and are left
    out of the search. The first supported pair is pinned to subgroup 0,
    which only removes relabelled duplicates.
    """
    n = _validate_counts(counts)
    if d_z < 1:
        raise ConfigError(f"d_z must be >= 1, got {d_z}")
    support = np.flatnonzero(n > 0)
    m = len(support)
    if m > MAX_SEARCH_PAIRS:
        raise ConfigError(f"{m} supported pairs exceed the exhaustive-search bound of {MAX_SEARCH_PAIRS}")
    ns = n[support]
    all_in_one = clustering_objective(ns, np.zeros(m, dtype=int))
    if m == 0:
        return SearchResult(np.full(len(n), -1), 0.0, 0.0, 1)
    rest = np.array(list(itertools.product(range(d_z), repeat=m - 1)), dtype=int).reshape(-1, m - 1)
    assign = np.concatenate([np.zeros((len(rest), 1), dtype=int), rest], axis=1)
    # vectorised objective over every assignment
    onehot = assign[..., None] == np.arange(d_z)  # (A, m, d_z)
    group_tot = np.einsum("amk,m->ak", onehot, ns)
    own_tot = np.take_along_axis(group_tot, assign, axis=1)  # (A, m)
    frac = ns / own_tot
    vals = (-_xlogy(own_tot - ns, 1.0 - frac) - _xlogy(np.broadcast_to(ns, frac.shape), frac)).sum(axis=1)
    best = int(np.argmin(vals))
    full = np.full(len(n), -1)
    full[support] = assign[best]
    return SearchResult(full, float(vals[best]), all_in_one, len(assign))


def oracle_report(counts, d_z: int) -> dict:
    res = exhaustive_clustering_search(counts, d_z)
    return {"all_in_one_objective": res.all_in_one, "best_objective": res.objective,
            "best_clustering": res.assignment.tolist()}
