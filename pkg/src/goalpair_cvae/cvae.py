"""Goal-pair CVAE with a discrete latent and pseudo-label auxiliary losses.

The model has three heads over a discrete latent ``z`` with ``d_z`` values:

* posterior ``q(z | T, g)`` from the context and the ground-truth pair,
* conditional prior ``p(z | T)`` from the context alone,
* decoder ``p(g | T, z)``, a softmax over the scenario's pruned candidate
  pairs. Each candidate is embedded from its coordinates and marginal
  probabilities, fused additively with an embedding of ``(T, z)`` and scored.

Expectations over ``z`` are computed exactly by enumerating all ``d_z``
values, weighted by the posterior, so no gradient estimator is involved.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import pseudo_labels as pl
from . import training
from .errors import ConfigError, ContractError, MissingArtifactError
from .goals import GoalGrid, GoalPairSet, top_m_bins
from .marginal import MarginalNet, ground_truth_bins
from .sim import ScenarioArrays

VARIANT_FAMILIES = {
    "vanilla": (),
    "noninteract": ("distance", "marginal"),
    "full": ("distance", "marginal", "interaction"),
    "distance": ("distance",),
    "marginal": ("marginal",),
    "interaction": ("interaction",),
}


@dataclass
class AnnealSchedule:
    mode: str = "linear"  # linear | cyclic | constant
    beta_max: float = 1.0
    warmup_frac: float = 0.3
    n_cycles: int = 4

    def beta(self, step: int, total: int) -> float:
        if self.mode == "constant":
            return self.beta_max
        if self.mode == "linear":
            warm = max(1, int(self.warmup_frac * total))
            return self.beta_max * min(1.0, step / warm)
        if self.mode == "cyclic":
            period = max(1, total // self.n_cycles)
            phase = (step % period) / period
            return self.beta_max * min(1.0, phase / max(self.warmup_frac, 1e-9))
        raise ConfigError(f"unknown annealing mode {self.mode!r}")


def _default_family_scale():
    return {"distance": 1.0, "marginal": 1.0, "interaction": 1.0}


@dataclass
class LossWeights:
    """``alpha`` scales every auxiliary term; ``family_scale`` rescales them individually."""

    alpha: float = 1.0
    anneal: AnnealSchedule = field(default_factory=AnnealSchedule)
    families: tuple[str, ...] = ()
    family_scale: dict = field(default_factory=_default_family_scale)

    def __post_init__(self):
        self.families = tuple(self.families)
        if self.alpha < 0 or self.anneal.beta_max < 0 or any(v < 0 for v in self.family_scale.values()):
            raise ConfigError("loss weights must be non-negative")
        unknown = (set(self.families) | set(self.family_scale)) - set(pl.FAMILIES)
        if unknown:
            raise ConfigError(f"unknown pseudo-label families: {sorted(unknown)}")

    def scale(self, family: str) -> float:
        return self.alpha * self.family_scale.get(family, 1.0)


@dataclass
class CvaeConfig:
    d_z: int = 2
    hidden: int = 64
    M: int = 8
    sigma_cells: float = 1.5
    interaction_feature: str = "displacement"
    weights: LossWeights = field(default_factory=LossWeights)
    optim: training.OptimConfig = field(default_factory=lambda: training.OptimConfig(steps=3000, batch_size=128))
    seed: int = 0


def variant_weights(variant: str, base: LossWeights | None = None) -> LossWeights:
    if variant not in VARIANT_FAMILIES:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {sorted(VARIANT_FAMILIES)}")
    base = base or LossWeights()
    alpha = 0.0 if variant == "vanilla" else base.alpha
    return LossWeights(alpha=alpha, anneal=base.anneal, families=VARIANT_FAMILIES[variant],
                       family_scale=dict(base.family_scale))


@dataclass
class Batch:
    """Model inputs for a set of scenarios over their pruned candidate sets."""

    ctx: np.ndarray  # (B, 4) normalised context
    raw_ctx: np.ndarray  # (B, 4)
    cand: np.ndarray  # (B, P) flat indices into the full joint set
    coords: np.ndarray  # (B, P, 2) candidate coordinates in metres
    pair_feats: np.ndarray  # (B, P, 4)
    gt: np.ndarray  # (B,) position of the ground truth inside the candidates
    gt_full: np.ndarray  # (B,) flat index of the ground truth in the full set

    @property
    def size(self):
        return len(self.ctx)

    @property
    def n_pairs(self):
        return self.cand.shape[1]

    def onehot(self) -> np.ndarray:
        y = np.zeros(self.cand.shape)
        y[np.arange(self.size), self.gt] = 1.0
        return y


class JointCVAE:
    def __init__(self, grid_a: GoalGrid, grid_b: GoalGrid, normalizer: training.Normalizer,
                 d_z: int = 2, hidden: int = 64, seed: int = 0, z_init_scale: float = 0.01):
        if d_z < 2:
            raise ConfigError(f"d_z must be >= 2, got {d_z}")
        self.grid_a, self.grid_b = grid_a, grid_b
        self.full_set = GoalPairSet.full(grid_a, grid_b)
        self.normalizer = normalizer
        self.d_z, self.hidden = d_z, hidden
        centers = np.concatenate([grid_a.centers, grid_b.centers])
        self.coord_norm = training.Normalizer(np.array(centers.mean()), np.array(centers.std() + 1e-9))
        rng = np.random.default_rng(seed)
        self.store = ad.ParameterStore()
        h = hidden
        self.post_net = ad.MLP(self.store, "posterior", [6, h, h, d_z], rng)
        self.prior_net = ad.MLP(self.store, "prior", [4, h, h, d_z], rng)
        self.ctx_net = ad.MLP(self.store, "dec_ctx", [4 + d_z, h, h], rng, out_scale=1.0)
        # decoders for different latents start out nearly identical
        self.store["dec_ctx.W0"].data[4:] *= z_init_scale
        self.pair_net = ad.MLP(self.store, "dec_pair", [4, h, h], rng, out_scale=1.0)
        self.score_net = ad.MLP(self.store, "dec_score", [h, 1], rng)
        self.trained = False

    # inputs -------------------------------------------------------------------

    def make_batch(self, contexts, marg_a, marg_b, cand_a, cand_b, gt_a=None, gt_b=None) -> Batch:
        """Assemble a batch from per-scenario candidate bins ``cand_a``/``cand_b`` (B, M).

        Without ground-truth bins the batch can only be used for the prior and
        the decoder; ``gt`` and ``gt_full`` are then -1.
        """
        contexts = np.atleast_2d(contexts)
        B, Ma = cand_a.shape
        Mb = cand_b.shape[1]
        Gb = len(self.grid_b)
        ia = np.repeat(cand_a, Mb, axis=1)
        ib = np.tile(cand_b, (1, Ma))
        cand = ia * Gb + ib
        coords = np.stack([self.grid_a.centers[ia], self.grid_b.centers[ib]], axis=-1)
        rows = np.arange(B)[:, None]
        feats = np.concatenate([self.coord_norm(coords), marg_a[rows, ia][..., None], marg_b[rows, ib][..., None]],
                               axis=-1)
        if gt_a is None or gt_b is None:
            missing = np.full(B, -1)
            return Batch(self.normalizer(contexts), contexts, cand, coords, feats, missing, missing)
        gt_full = np.asarray(gt_a) * Gb + np.asarray(gt_b)
        hit = cand == gt_full[:, None]
        if not hit.any(axis=1).all():
            raise ContractError("ground-truth pair missing from the candidate set")
        return Batch(self.normalizer(contexts), contexts, cand, coords, feats, hit.argmax(axis=1), gt_full)

    # heads ------------------------------------------------------------------------

    def posterior_logits(self, batch: Batch) -> ad.Tensor:
        if np.any(batch.gt < 0):
            raise ContractError("the posterior needs the ground-truth pair of every scenario")
        gt_xy = self.coord_norm(batch.coords[np.arange(batch.size), batch.gt])
        return self.post_net(np.concatenate([batch.ctx, gt_xy], axis=1))

    def prior_logits(self, batch: Batch) -> ad.Tensor:
        return self.prior_net(batch.ctx)

    def decode_logits(self, batch: Batch, z: np.ndarray | None = None) -> ad.Tensor:
        """Logits ``(B, Z, P)`` for latent indices ``z`` (all latents by default)."""
        z = np.arange(self.d_z) if z is None else np.atleast_1d(z)
        if np.any((z < 0) | (z >= self.d_z)):
            raise ContractError(f"latent index out of range [0, {self.d_z})")
        B, Z = batch.size, len(z)
        onehot = np.broadcast_to(np.eye(self.d_z)[z], (B, Z, self.d_z))
        ctx = np.broadcast_to(batch.ctx[:, None, :], (B, Z, 4))
        hc = self.ctx_net(np.concatenate([ctx, onehot], axis=-1))  # (B, Z, H)
        hp = self.pair_net(batch.pair_feats)  # (B, P, H)
        fused = ad.tanh(ad.reshape(hc, (B, Z, 1, self.hidden)) + ad.reshape(hp, (B, 1, batch.n_pairs, self.hidden)))
        return ad.reshape(self.score_net(fused), (B, Z, batch.n_pairs))

    def posterior(self, batch: Batch) -> np.ndarray:
        return ad.softmax(self.posterior_logits(batch)).data

    def prior(self, batch: Batch) -> np.ndarray:
        return ad.softmax(self.prior_logits(batch)).data

    def decode(self, batch: Batch, z=None) -> np.ndarray:
        return ad.softmax(self.decode_logits(batch, z)).data

    def mixture(self, batch: Batch) -> np.ndarray:
        """``sum_z p(z|T) p(g|T,z)`` over the candidates, shape (B, P)."""
        return np.einsum("bz,bzp->bp", self.prior(batch), self.decode(batch))

    # persistence ----------------------------------------------------------------

    def meta(self) -> dict:
        return {"kind": "joint_cvae", "grid_a": self.grid_a.to_dict(), "grid_b": self.grid_b.to_dict(),
                "normalizer": self.normalizer.to_dict(), "d_z": self.d_z, "hidden": self.hidden}

    def save(self, path, extra: dict | None = None):
        ad.save_checkpoint(path, {"cvae": self.store}, {**self.meta(), **(extra or {})})

    @classmethod
    def load(cls, path) -> "JointCVAE":
        if not Path(path).exists():
            raise MissingArtifactError(f"joint model checkpoint not found: {path}")
        groups, meta = ad.load_checkpoint(path)
        model = cls(GoalGrid.from_dict(meta["grid_a"]), GoalGrid.from_dict(meta["grid_b"]),
                    training.Normalizer.from_dict(meta["normalizer"]), meta["d_z"], meta["hidden"])
        model.store.load_state_dict(groups["cvae"])
        model.store.freeze()
        model.trained = True
        return model


# ----------------------------------------------------------------------------
# losses


@dataclass
class LabelTables:
    """Context-independent pseudo-label matrices over the full joint set."""

    distance: np.ndarray
    marginal_a: np.ndarray
    marginal_b: np.ndarray

    @classmethod
    def build(cls, full_set: GoalPairSet, sigma: float) -> "LabelTables":
        ma, mb = pl.marginal_labels(full_set)
        return cls(pl.distance_labels(full_set, sigma).values, ma.values, mb.values)


def _gather(table: np.ndarray, batch: Batch) -> np.ndarray:
    return table[batch.gt_full[:, None], batch.cand]


def elbo_terms(model: JointCVAE, batch: Batch) -> dict[str, ad.Tensor]:
    """Per-sample reconstruction and KL terms plus intermediates, all exact in z."""
    q_logits = model.posterior_logits(batch)
    p_logits = model.prior_logits(batch)
    q = ad.softmax(q_logits)
    dec = ad.softmax(model.decode_logits(batch))  # (B, Z, P)
    y = np.broadcast_to(batch.onehot()[:, None, :], dec.shape)
    recon = ad.reduce_sum(q * ad.bce(dec, y, axis=-1), axis=-1)
    kl = ad.kl_from_logits(q_logits, p_logits)
    return {"q": q, "decoded": dec, "recon": recon, "kl": kl}


def aux_terms(q: ad.Tensor, dec: ad.Tensor, batch: Batch, families, tables: LabelTables | None,
              interaction_feature: str = "displacement") -> dict[str, ad.Tensor]:
    """Posterior-weighted auxiliary losses, one per enabled family, per sample.

    Each family's loss is evaluated on every latent's decoded distribution and
    weighted by ``q(z | T, g)``: the labels only act on the latent the ground
    truth is assigned to.
    """
    out = {}
    if families and tables is None and set(families) - {"interaction"}:
        raise ConfigError("pseudo-label tables are required for the distance/marginal families")
    shape = dec.shape
    for fam in families:
        if fam == "distance":
            per_z = ad.bce(dec, np.broadcast_to(_gather(tables.distance, batch)[:, None, :], shape), axis=-1)
        elif fam == "marginal":
            la = np.broadcast_to(_gather(tables.marginal_a, batch)[:, None, :], shape)
            lb = np.broadcast_to(_gather(tables.marginal_b, batch)[:, None, :], shape)
            per_z = pl.f_marginal(la, lb, dec)
        elif fam == "interaction":
            labels = pl.interaction_labels_batch(batch.raw_ctx, batch.coords, interaction_feature, batch.gt)
            per_z = pl.f_interact(np.broadcast_to(labels[:, None, :], shape), dec)
        else:
            raise ConfigError(f"unknown pseudo-label family {fam!r}")
        out[fam] = ad.reduce_sum(q * per_z, axis=-1)
    return out


def elbo_loss(model: JointCVAE, batch: Batch, weights: LossWeights, step: int, total_steps: int,
              tables: LabelTables | None = None, interaction_feature: str = "displacement"):
    """Mean negative ELBO plus ``alpha`` times the auxiliary losses.

    Returns ``(loss, diagnostics)``.
    """
    beta = weights.anneal.beta(step, total_steps)
    terms = elbo_terms(model, batch)
    loss = terms["recon"] + beta * terms["kl"]
    aux = aux_terms(terms["q"], terms["decoded"], batch, weights.families, tables, interaction_feature) \
        if weights.alpha > 0 else {}
    for fam, t in aux.items():
        loss = loss + weights.scale(fam) * t
    info = {"beta": beta, "recon": float(terms["recon"].data.mean()), "kl": float(terms["kl"].data.mean())}
    for fam in pl.FAMILIES:
        info[f"aux_{fam}"] = float(aux[fam].data.mean()) if fam in aux else 0.0
    return ad.reduce_mean(loss), info


def auxiliary_loss(model: JointCVAE, batch: Batch, weights: LossWeights, tables: LabelTables | None = None,
                   interaction_feature: str = "displacement") -> ad.Tensor:
    """Weighted mean posterior-weighted auxiliary loss (0 when nothing is enabled)."""
    if not weights.families or weights.alpha == 0:
        return ad.Tensor(0.0)
    terms = elbo_terms(model, batch)
    aux = aux_terms(terms["q"], terms["decoded"], batch, weights.families, tables, interaction_feature)
    total = None
    for fam, t in aux.items():
        total = t * weights.scale(fam) if total is None else total + t * weights.scale(fam)
    return ad.reduce_mean(total)


# ----------------------------------------------------------------------------
# data preparation and training


@dataclass
class PreparedData:
    contexts: np.ndarray
    marg_a: np.ndarray
    marg_b: np.ndarray
    cand_a: np.ndarray
    cand_b: np.ndarray
    gt_a: np.ndarray
    gt_b: np.ndarray
    forced: int  # scenarios whose ground truth had to be re-inserted

    def batch(self, model: JointCVAE, idx, with_truth: bool = True) -> Batch:
        gts = (self.gt_a[idx], self.gt_b[idx]) if with_truth else (None, None)
        return model.make_batch(self.contexts[idx], self.marg_a[idx], self.marg_b[idx], self.cand_a[idx],
                                self.cand_b[idx], *gts)

    def __len__(self):
        return len(self.contexts)


def _force_include(cand: np.ndarray, marg: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cand = cand.copy()
    missing = ~(cand == gt[:, None]).any(axis=1)
    for i in np.flatnonzero(missing):
        worst = np.argmin(marg[i, cand[i]])
        cand[i, worst] = gt[i]
        cand[i] = np.sort(cand[i])
    return cand, missing


def prepare(data: ScenarioArrays, marginal: MarginalNet, M: int, force_include: bool = True) -> PreparedData:
    """Run the frozen marginal model, prune to top-M bins and locate the ground truth."""
    marg_a, marg_b = marginal.predict_batch(data.contexts)
    gt_a, gt_b = ground_truth_bins(data, marginal.grid_a, marginal.grid_b)
    cand_a, cand_b = top_m_bins(marg_a, M), top_m_bins(marg_b, M)
    forced = 0
    if force_include:
        cand_a, miss_a = _force_include(cand_a, marg_a, gt_a)
        cand_b, miss_b = _force_include(cand_b, marg_b, gt_b)
        forced = int((miss_a | miss_b).sum())
    return PreparedData(data.contexts, marg_a, marg_b, cand_a, cand_b, gt_a, gt_b, forced)


def train_joint(data: ScenarioArrays, marginal: MarginalNet, variant: str = "full",
                config: CvaeConfig = CvaeConfig()) -> tuple[JointCVAE, list[dict], PreparedData]:
    """Train the joint model on top of a frozen marginal model.

    ``variant`` selects the pseudo-label families (vanilla disables the
    auxiliary loss). Returns the model, the training-log rows and the
    prepared training data.
    """
    if not marginal.trained:
        raise ContractError("the marginal model must be trained before the joint model")
    weights = variant_weights(variant, config.weights)
    prepared = prepare(data, marginal, config.M)
    model = JointCVAE(marginal.grid_a, marginal.grid_b, training.Normalizer.fit(data.contexts),
                      config.d_z, config.hidden, config.seed)
    tables = LabelTables.build(model.full_set, config.sigma_cells * marginal.grid_a.width) \
        if set(weights.families) - {"interaction"} else None
    total = config.optim.steps

    def step_fn(idx, step):
        return elbo_loss(model, prepared.batch(model, idx), weights, step, total, tables,
                         config.interaction_feature)

    rows = training.run(model.store, len(data), step_fn, config.optim, np.random.default_rng(config.seed + 7))
    model.store.freeze()
    model.trained = True
    return model, rows, prepared


def sample_goal_pairs(model: JointCVAE, batch: Batch, N: int, rng: np.random.Generator):
    """Ancestral samples ``z ~ p(z|T)``, ``g ~ p(g|T,z)`` for a single-scenario batch.

    Returns ``(pair positions within the candidates, latent draws)``.
    """
    if batch.size != 1:
        raise ContractError("sample_goal_pairs expects a single-scenario batch")
    if N <= 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    prior = model.prior(batch)[0]
    dec = model.decode(batch)[0]
    z = rng.choice(model.d_z, size=N, p=prior / prior.sum())
    u = rng.random(N)
    cdf = np.cumsum(dec, axis=1)
    pairs = np.minimum((u[:, None] > cdf[z]).sum(axis=1), batch.n_pairs - 1)
    return pairs, z

