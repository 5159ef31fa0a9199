"""Experiment configuration: defaults, YAML/JSON files, environment overrides.

Precedence, lowest first: dataclass defaults, the ``--config`` file,
``GPCVAE_*`` environment variables, explicit command-line flags. Nested keys
in environment variables are joined with a double underscore, for example
``GPCVAE_JOINT__STEPS=500`` or ``GPCVAE_SEEDS=[0,1]``; values are parsed as
YAML scalars or flow sequences.
"""

from __future__ import annotations

import json
import os
import subprocess
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from importlib import metadata
from pathlib import Path

import yaml

from . import training
from .completion import CompletionConfig
from .cvae import VARIANT_FAMILIES, AnnealSchedule, CvaeConfig, LossWeights
from .errors import ConfigError
from .marginal import MarginalConfig
from .sim import IdmParams, InitDistribution, ScenarioParams

ENV_PREFIX = "GPCVAE_"
RESOLVED_NAME = "resolved_config.json"
VERSION_NAME = "VERSION"


@dataclass
class SimSection:
    eta: float = 2.0
    dt: float = 0.5
    horizon: int = 20
    far_target: float = 1e4
    headway_sentinel: float = 1e6
    sign_mode: str = "literal"
    s_range: tuple[float, float] = (20.0, 60.0)
    v_range: tuple[float, float] = (5.0, 12.0)


@dataclass
class IdmSection:
    v0: float = 10.0
    T: float = 1.5
    a_max: float = 2.0
    b: float = 3.0
    s0: float = 2.0
    delta: float = 4.0


@dataclass
class NetSection:
    hidden: tuple[int, ...] = (64, 64)
    steps: int = 10000
    batch_size: int = 128
    lr: float = 3e-3


@dataclass
class JointSection:
    d_z: int = 2
    hidden: int = 64
    sigma_cells: float = 1.5
    interaction_feature: str = "displacement"
    # tuned on the toy: beta_max = 2.5 makes the vanilla model collapse reliably and alpha = 10 lets
    # each family escape on its own; the dense RBF distance labels otherwise swamp reconstruction
    alpha: float = 10.0
    family_scale: dict = field(default_factory=lambda: {"distance": 0.1, "marginal": 1.0, "interaction": 1.0})
    beta_max: float = 2.5
    anneal: str = "linear"
    warmup_frac: float = 0.3
    n_cycles: int = 4
    steps: int = 3000
    batch_size: int = 128
    lr: float = 1e-3


@dataclass
class OracleSection:
    initial: tuple[float, float, float, float] = (40.0, 8.5, 40.0, 8.5)  # s_a, v_a, s_b, v_b
    n: int = 1000
    d_z: int = 2


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    n_train: int = 10000
    n_heldout: int = 2000
    n_eval: int = 500
    n_bins: int = 16
    M: int = 8
    N: int = 8
    K: int = 6
    N_values: tuple[int, ...] = (8, 120)
    seeds: tuple[int, ...] = (0, 1, 2)
    variants: tuple[str, ...] = ("vanilla", "noninteract", "full")
    sim: SimSection = field(default_factory=SimSection)
    idm: IdmSection = field(default_factory=IdmSection)
    marginal: NetSection = field(default_factory=NetSection)
    completion: NetSection = field(default_factory=lambda: NetSection(steps=4000))
    joint: JointSection = field(default_factory=JointSection)
    oracle: OracleSection = field(default_factory=OracleSection)

    def validate(self) -> "ExperimentConfig":
        for name in ("n_train", "n_heldout", "n_eval", "n_bins", "M", "N", "K"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.M > self.n_bins:
            raise ConfigError(f"M={self.M} exceeds the grid size {self.n_bins}")
        unknown = set(self.variants) - set(VARIANT_FAMILIES)
        if unknown:
            raise ConfigError(f"unknown variants {sorted(unknown)}")
        if self.joint.anneal not in ("linear", "cyclic", "constant"):
            raise ConfigError(f"unknown annealing mode {self.joint.anneal!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        # the parameter objects validate their own ranges
        self.scenario_params()
        self.idm_params()
        self.init_distribution()
        self.loss_weights()
        return self

    # builders ------------------------------------------------------------------

    def scenario_params(self) -> ScenarioParams:
        s = self.sim
        return ScenarioParams(s.eta, s.dt, s.horizon, s.far_target, s.headway_sentinel, s.sign_mode)

    def idm_params(self) -> IdmParams:
        return IdmParams(**asdict(self.idm))

    def init_distribution(self) -> InitDistribution:
        return InitDistribution(tuple(self.sim.s_range), tuple(self.sim.v_range))

    def marginal_config(self) -> MarginalConfig:
        m = self.marginal
        return MarginalConfig(hidden=tuple(m.hidden), optim=training.OptimConfig(m.steps, m.batch_size, m.lr),
                              seed=self.seed, M=self.M)

    def completion_config(self) -> CompletionConfig:
        c = self.completion
        return CompletionConfig(hidden=tuple(c.hidden), optim=training.OptimConfig(c.steps, c.batch_size, c.lr),
                                seed=self.seed)

    def loss_weights(self) -> LossWeights:
        j = self.joint
        return LossWeights(alpha=j.alpha, anneal=AnnealSchedule(j.anneal, j.beta_max, j.warmup_frac, j.n_cycles),
                           family_scale=dict(j.family_scale))

    def cvae_config(self, seed: int | None = None) -> CvaeConfig:
        j = self.joint
        return CvaeConfig(d_z=j.d_z, hidden=j.hidden, M=self.M, sigma_cells=j.sigma_cells,
                          interaction_feature=j.interaction_feature, weights=self.loss_weights(),
                          optim=training.OptimConfig(j.steps, j.batch_size, j.lr),
                          seed=self.seed if seed is None else seed)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}{name}.")
        elif isinstance(default, tuple):
            kwargs[name] = tuple(value) if isinstance(value, (list, tuple)) else (value,)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "family_scale":
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        # top-level keys that are upper case in the dataclass
        path[0] = {"m": "M", "n": "N", "k": "K", "n_values": "N_values"}.get(path[0], path[0])
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse environment override {key}={raw!r}: {exc}") from None
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = value
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None, environ=None) -> ExperimentConfig:
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        text = p.read_text()
        try:
            data = (json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)) or {}
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from None
    data = _merge(data, env_overrides(environ))
    data = _merge(data, {k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        cfg = _build(ExperimentConfig, data, "")
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


def version_string() -> str:
    """Package version plus ``git describe`` of the source tree when available."""
    try:
        ver = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        ver = "unknown"
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                              capture_output=True, text=True, timeout=5)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{ver}+{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return ver


def stamp(directory: str | Path, cfg: ExperimentConfig) -> Path:
    """Create ``directory`` and record the resolved config and build version in it."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / RESOLVED_NAME).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    (d / VERSION_NAME).write_text(version_string() + "\n")
    return d
