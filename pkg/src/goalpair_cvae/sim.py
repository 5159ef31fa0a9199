"""Two-vehicle intersection simulator.

Two vehicles approach a shared collision point along crossing paths. One of
them is granted the right-of-way, sampled from the difference of their
initial time headways; both then follow the intelligent driver model (IDM)
towards a target point that depends on who has the right-of-way.

Displacements ``s`` are measured to the collision point: positive before
crossing it, negative after.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError

GAP_FLOOR = 0.1  # metres
MAX_REDRAWS = 10_000  # initial-condition re-draws per scenario under a p_A filter


@dataclass(frozen=True)
class VehicleState:
    s: float
    v: float


@dataclass(frozen=True)
class ScenarioParams:
    eta: float = 2.0
    dt: float = 0.5
    horizon: int = 20
    far_target: float = 1.0e4
    headway_sentinel: float = 1.0e6
    # "literal" uses 0.5 (tanh((T_a - T_b) / eta) + 1) as written, "intuitive" flips the sign
    # so that the vehicle with the shorter headway is favoured.
    sign_mode: str = "literal"

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigError(f"eta must be positive, got {self.eta}")
        if not self.dt > 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if int(self.horizon) < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.horizon}")
        if self.sign_mode not in ("literal", "intuitive"):
            raise ConfigError(f"unknown sign_mode {self.sign_mode!r}")


@dataclass(frozen=True)
class IdmParams:
    v0: float = 10.0
    T: float = 1.5
    a_max: float = 2.0
    b: float = 3.0
    s0: float = 2.0
    delta: float = 4.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value > 0:
                raise ConfigError(f"IDM parameter {name} must be positive, got {value}")


@dataclass(frozen=True)
class InitDistribution:
    """Uniform ranges for the initial displacement and speed of each vehicle."""

    s_range: tuple[float, float] = (20.0, 60.0)
    v_range: tuple[float, float] = (5.0, 12.0)

    def __post_init__(self):
        for name in ("s_range", "v_range"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise ConfigError(f"invalid {name}: ({lo}, {hi})")
        if self.v_range[0] < 0:
            raise ConfigError("initial speeds must be non-negative")


@dataclass
class Scenario:
    initial: tuple[VehicleState, VehicleState]
    right_of_way: str  # "A" or "B"
    # rollout[k] is the list of (s, v) states of vehicle k, length horizon + 1
    rollout: list[list[tuple[float, float]]] = field(default_factory=list)

    @property
    def endpoints(self) -> tuple[float, float]:
        return (self.rollout[0][-1][0], self.rollout[1][-1][0])

    @property
    def context(self) -> np.ndarray:
        a, b = self.initial
        return np.array([a.s, a.v, b.s, b.v])

    def displacements(self) -> np.ndarray:
        """(2, horizon + 1) array of displacements."""
        return np.array([[sv[0] for sv in veh] for veh in self.rollout])

    def to_record(self) -> dict:
        return {
            "initial": [[st.s, st.v] for st in self.initial],
            "row": self.right_of_way,
            "rollout": [[list(sv) for sv in veh] for veh in self.rollout],
            "endpoints": list(self.endpoints),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Scenario":
        initial = tuple(VehicleState(float(s), float(v)) for s, v in rec["initial"])
        rollout = [[(float(s), float(v)) for s, v in veh] for veh in rec["rollout"]]
        return cls(initial=initial, right_of_way=rec["row"], rollout=rollout)


def time_headway(state: VehicleState, params: ScenarioParams = ScenarioParams()) -> float:
    if state.s <= 0:
        return 0.0
    if state.v <= 0:
        return params.headway_sentinel
    return max(state.s / state.v, 0.0)


def right_of_way_probability(
    initial: Sequence[VehicleState], params: ScenarioParams = ScenarioParams()
) -> float:
    """Probability that vehicle A is granted the right-of-way."""
    diff = time_headway(initial[0], params) - time_headway(initial[1], params)
    if params.sign_mode == "intuitive":
        diff = -diff
    return 0.5 * (math.tanh(diff / params.eta) + 1.0)


def idm_acceleration(state: VehicleState, target_gap: float, idm: IdmParams = IdmParams()) -> float:
    """IDM acceleration towards a stationary target ``target_gap`` metres ahead."""
    gap = max(target_gap, GAP_FLOOR)
    v = state.v
    desired = idm.s0 + v * idm.T + v * v / (2.0 * math.sqrt(idm.a_max * idm.b))
    return idm.a_max * (1.0 - (v / idm.v0) ** idm.delta - (desired / gap) ** 2)


def assign_target(
    own: VehicleState,
    other: VehicleState,
    own_has_row: bool,
    params: ScenarioParams = ScenarioParams(),
) -> float:
    """Target displacement for ``own``; 0.0 is the collision point."""
    if own_has_row or own.s <= 0 or other.s <= 0:
        return own.s - params.far_target
    return 0.0


def rollout(
    initial: Sequence[VehicleState],
    right_of_way: str,
    params: ScenarioParams = ScenarioParams(),
    idm: IdmParams = IdmParams(),
) -> Scenario:
    if right_of_way not in ("A", "B"):
        raise ValueError(f"right_of_way must be 'A' or 'B', got {right_of_way!r}")
    states = list(initial)
    traj = [[(st.s, st.v)] for st in states]
    row = [right_of_way == "A", right_of_way == "B"]
    for _ in range(params.horizon):
        accel = []
        for k in (0, 1):
            own, other = states[k], states[1 - k]
            target = assign_target(own, other, row[k], params)
            accel.append(idm_acceleration(own, own.s - target, idm))
        new_states = []
        for k in (0, 1):
            v = max(states[k].v + accel[k] * params.dt, 0.0)
            s = states[k].s - v * params.dt
            new_states.append(VehicleState(s, v))
            traj[k].append((s, v))
        states = new_states
    return Scenario(initial=tuple(initial), right_of_way=right_of_way, rollout=traj)


def sample_initial(rng: np.random.Generator, dist: InitDistribution) -> tuple[VehicleState, VehicleState]:
    vals = [
        (rng.uniform(*dist.s_range), rng.uniform(*dist.v_range)) for _ in range(2)
    ]
    return tuple(VehicleState(float(s), float(v)) for s, v in vals)


def scenario_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def generate_dataset(
    n: int,
    init_distribution: InitDistribution = InitDistribution(),
    params: ScenarioParams = ScenarioParams(),
    idm: IdmParams = IdmParams(),
    seed: int = 0,
    fixed_initial: Sequence[VehicleState] | None = None,
    p_range: tuple[float, float] | None = None,
) -> list[Scenario]:
    """Sample ``n`` scenarios.

    Every scenario draws from its own generator keyed on ``(seed, index)`` so
    the dataset is reproducible and can be generated in any order.
    ``fixed_initial`` pins the initial condition and only samples the
    right-of-way. ``p_range`` keeps re-drawing the initial condition until
    the right-of-way probability falls inside the closed interval.
    """
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    if p_range is not None and not 0.0 <= p_range[0] <= p_range[1] <= 1.0:
        raise ConfigError(f"invalid right-of-way probability range {p_range}")
    out = []
    for i in range(n):
        rng = scenario_rng(seed, i)
        initial = tuple(fixed_initial) if fixed_initial is not None else sample_initial(rng, init_distribution)
        p_a = right_of_way_probability(initial, params)
        tries = 0
        while p_range is not None and not p_range[0] <= p_a <= p_range[1]:
            tries += 1
            if fixed_initial is not None or tries > MAX_REDRAWS:
                raise ConfigError(f"no initial condition with p_A in {p_range} after {tries} draws")
            initial = sample_initial(rng, init_distribution)
            p_a = right_of_way_probability(initial, params)
        row = "A" if rng.random() < p_a else "B"
        out.append(rollout(initial, row, params, idm))
    return out


def write_jsonl(scenarios: Iterable[Scenario], path: str | Path) -> None:
    with open(path, "w") as fh:
        for sc in scenarios:
            fh.write(json.dumps(sc.to_record()) + "\n")


def read_jsonl(path: str | Path) -> list[Scenario]:
    with open(path) as fh:
        return [Scenario.from_record(json.loads(line)) for line in fh if line.strip()]


@dataclass
class ScenarioArrays:
    """Column view of a scenario list used by the learning code."""

    contexts: np.ndarray  # (n, 4): s_a0, v_a0, s_b0, v_b0
    row_a: np.ndarray  # (n,) bool
    trajectories: np.ndarray  # (n, 2, horizon + 1) displacements

    @property
    def endpoints(self) -> np.ndarray:
        return self.trajectories[:, :, -1]

    def __len__(self):
        return len(self.contexts)

    def subset(self, idx) -> "ScenarioArrays":
        return ScenarioArrays(self.contexts[idx], self.row_a[idx], self.trajectories[idx])


def to_arrays(scenarios: Sequence[Scenario]) -> ScenarioArrays:
    return ScenarioArrays(
        contexts=np.stack([sc.context for sc in scenarios]),
        row_a=np.array([sc.right_of_way == "A" for sc in scenarios]),
        trajectories=np.stack([sc.displacements() for sc in scenarios]),
    )
