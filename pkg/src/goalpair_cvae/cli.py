"""Command-line experiment driver.

Output layout under ``--out``::

    data/       train.jsonl  heldout.jsonl  eval.jsonl
    models/     marginal.json  completion.json  joint_<variant>_s<seed>.json  *_log.csv
    eval/       eval_<variant>_s<seed>_N<N>_K<K>.csv  (+ .json summary)
    latent/     latent_<variant>_s<seed>.json  calibration_<variant>_s<seed>.csv
    oracle/     oracle.json  oracle_pairs.csv
    ablation/   ablation.csv  ablation.json
    plots/      *.csv  *.png

Each directory written to also receives ``resolved_config.json`` and
``VERSION``. Failures exit nonzero and print one JSON error record to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import collapse, config as cfgmod, experiment
from .completion import CompletionNet, train_completion
from .cvae import VARIANT_FAMILIES, JointCVAE, train_joint
from .errors import ConfigError, ContractError, MissingArtifactError, TrainingError
from .goals import GoalGrid, pruning_coverage
from .marginal import MarginalNet, ground_truth_bins, train_marginal
from .sim import VehicleState, generate_dataset, read_jsonl, to_arrays, write_jsonl

EXIT_CODES = {ConfigError: 2, MissingArtifactError: 3, ContractError: 4, TrainingError: 5}
SPLITS = {"train": 0, "heldout": 1, "eval": 2}  # seed offsets
ABLATION_FIELDS = ("variant", "N", "K", "minADE_mean", "minADE_std", "minFDE_mean", "minFDE_std", "n_seeds",
                   "purity_mean", "mi_mean", "collapsed_seeds")
LATENT_MAP_FIELDS = ("variant", "seed", "z", "prior", "bin_a", "bin_b", "goal_a", "goal_b", "prob")
CALIBRATION_FIELDS = ("variant", "seed", "condition", "p_a", "prior_mass", "abs_error")


# ----------------------------------------------------------------------------
# paths and io


class Layout:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def dir(self, name: str) -> Path:
        return self.root / name

    def data(self, split: str) -> Path:
        return self.root / "data" / f"{split}.jsonl"

    def model(self, name: str) -> Path:
        return self.root / "models" / f"{name}.json"

    def joint(self, variant: str, seed: int) -> Path:
        return self.model(f"joint_{variant}_s{seed}")

    def eval_csv(self, variant: str, seed: int, N: int, K: int) -> Path:
        return self.root / "eval" / f"eval_{variant}_s{seed}_N{N}_K{K}.csv"

    def latent(self, variant: str, seed: int) -> Path:
        return self.root / "latent" / f"latent_{variant}_s{seed}.json"


def require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(2, f"{what} not found", str(path))
    return path


def write_csv(path: Path, rows: list[dict], fields) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return path


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def load_split(layout: Layout, split: str):
    return to_arrays(read_jsonl(require(layout.data(split), f"{split} dataset")))


def load_marginal(layout: Layout) -> MarginalNet:
    return MarginalNet.load(require(layout.model("marginal"), "marginal checkpoint"))


def load_joint(layout: Layout, variant: str, seed: int) -> JointCVAE:
    return JointCVAE.load(require(layout.joint(variant, seed), f"{variant} joint checkpoint"))


def _log_fields(rows: list[dict]) -> list[str]:
    keys = list(dict.fromkeys(k for r in rows for k in r))
    return ["step"] + [k for k in keys if k != "step"]


# ----------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg, layout: Layout, args) -> dict:
    d = cfgmod.stamp(layout.dir("data"), cfg)
    sizes = {"train": cfg.n_train, "heldout": cfg.n_heldout, "eval": cfg.n_eval}
    out = {}
    for split, offset in SPLITS.items():
        p_range = experiment.STRONG_P_RANGE if split == "eval" else None
        data = generate_dataset(sizes[split], cfg.init_distribution(), cfg.scenario_params(), cfg.idm_params(),
                                seed=3 * cfg.seed + offset, p_range=p_range)
        write_jsonl(data, d / f"{split}.jsonl")
        out[split] = {"path": str(d / f"{split}.jsonl"), "n": len(data),
                      "frac_a": float(np.mean([sc.right_of_way == "A" for sc in data]))}
    return out


def cmd_train_marginal(cfg, layout: Layout, args) -> dict:
    data = load_split(layout, "train")
    # one grid for both agents so the marginal network can share its weights
    grid_a = grid_b = GoalGrid.covering(data.endpoints, cfg.n_bins)
    net, rows = train_marginal(data, grid_a, grid_b, cfg.marginal_config())
    d = cfgmod.stamp(layout.dir("models"), cfg)
    net.save(d / "marginal.json")
    write_csv(d / "marginal_log.csv", rows, _log_fields(rows))
    held = load_split(layout, "heldout") if layout.data("heldout").exists() else data
    pa, pb = net.predict_batch(held.contexts)
    cov = pruning_coverage(pa, pb, *ground_truth_bins(held, grid_a, grid_b), cfg.M)
    return {"checkpoint": str(d / "marginal.json"), "final_loss": rows[-1]["loss"],
            "heldout_top_m_coverage": float(cov)}


def cmd_train_completion(cfg, layout: Layout, args) -> dict:
    data = load_split(layout, "train")
    net, rows = train_completion(data, cfg.completion_config())
    d = cfgmod.stamp(layout.dir("models"), cfg)
    net.save(d / "completion.json")
    write_csv(d / "completion_log.csv", rows, _log_fields(rows))
    return {"checkpoint": str(d / "completion.json"), "final_loss": rows[-1]["loss"]}


def train_one_joint(cfg, layout: Layout, variant: str, seed: int) -> dict:
    data = load_split(layout, "train")
    marginal = load_marginal(layout)
    model, rows, prepared = train_joint(data, marginal, variant, cfg.cvae_config(seed))
    d = cfgmod.stamp(layout.dir("models"), cfg)
    path = layout.joint(variant, seed)
    model.save(path, {"variant": variant, "seed": seed})
    write_csv(d / f"joint_{variant}_s{seed}_log.csv", rows, _log_fields(rows))
    return {"checkpoint": str(path), "variant": variant, "seed": seed, "final": rows[-1],
            "forced_ground_truth": prepared.forced}


def cmd_train_joint(cfg, layout: Layout, args) -> dict:
    return train_one_joint(cfg, layout, args.variant, cfg.seed)


def eval_one(cfg, layout: Layout, variant: str, seed: int, N: int, K: int) -> dict:
    cvae = load_joint(layout, variant, seed)
    completion = CompletionNet.load(require(layout.model("completion"), "completion checkpoint"))
    marginal = load_marginal(layout)
    data = load_split(layout, "eval")
    rows = experiment.evaluate(cvae, completion, marginal, data, N, K, cfg.M, seed=seed, variant=variant)
    cfgmod.stamp(layout.dir("eval"), cfg)
    path = write_csv(layout.eval_csv(variant, seed, N, K), rows, experiment.EVAL_FIELDS)
    summary = {"variant": variant, "seed": seed, "N": N, "K": K,
               "minADE": experiment.summarize([r["minADE"] for r in rows]),
               "minFDE": experiment.summarize([r["minFDE"] for r in rows]),
               "gt_in_candidates": float(np.mean([r["gt_in_candidates"] for r in rows]))}
    write_json(path.with_suffix(".json"), summary)
    return {"csv": str(path), **summary}


def cmd_eval(cfg, layout: Layout, args) -> dict:
    return eval_one(cfg, layout, args.variant, cfg.seed, cfg.N, cfg.K)


def latent_one(cfg, layout: Layout, variant: str, seed: int) -> dict:
    cvae = load_joint(layout, variant, seed)
    marginal = load_marginal(layout)
    held = load_split(layout, "heldout")
    report = experiment.analyze_latent(cvae, marginal, held, cfg.M)
    cal = experiment.prior_calibration(cvae, marginal, held, cfg.M,
                                       experiment.calibration_conditions(params=cfg.scenario_params()),
                                       cfg.scenario_params())
    cfgmod.stamp(layout.dir("latent"), cfg)
    cal_rows = [{"variant": variant, "seed": seed, "condition": i, "p_a": float(p), "prior_mass": float(m),
                 "abs_error": float(e)} for i, (p, m, e) in enumerate(zip(cal.p_a, cal.prior_mass, cal.errors))]
    write_csv(layout.dir("latent") / f"calibration_{variant}_s{seed}.csv", cal_rows, CALIBRATION_FIELDS)
    out = {"variant": variant, "seed": seed, **report.to_dict(), "calibration_mean_abs_error": float(cal.errors.mean())}
    write_json(layout.latent(variant, seed), out)
    return out


def cmd_analyze_latent(cfg, layout: Layout, args) -> dict:
    return latent_one(cfg, layout, args.variant, cfg.seed)


def cmd_oracle(cfg, layout: Layout, args) -> dict:
    """Exhaustive clustering search on goal-pair counts.

    With ``--counts`` the given vector is searched directly. Otherwise
    ``oracle.n`` scenarios are simulated from the fixed initial condition in
    the config and their goal pairs are counted on the marginal model's grid
    (or on a grid covering the simulated endpoints when no model exists).
    """
    d = cfgmod.stamp(layout.dir("oracle"), cfg)
    if args.counts:
        counts = np.array([int(c) for c in args.counts.split(",")])
        out = {"counts": counts.tolist(), **collapse.oracle_report(counts, cfg.oracle.d_z)}
        write_json(d / "oracle.json", out)
        return out
    s_a, v_a, s_b, v_b = cfg.oracle.initial
    data = to_arrays(generate_dataset(cfg.oracle.n, params=cfg.scenario_params(), idm=cfg.idm_params(),
                                      seed=cfg.seed, fixed_initial=(VehicleState(s_a, v_a), VehicleState(s_b, v_b))))
    if layout.model("marginal").exists():
        m = load_marginal(layout)
        grid_a, grid_b = m.grid_a, m.grid_b
    else:
        grid_a = grid_b = GoalGrid.covering(data.endpoints, cfg.n_bins)
    ba, bb = ground_truth_bins(data, grid_a, grid_b)
    pair_ids = ba * len(grid_b) + bb
    pairs, inverse, counts = np.unique(pair_ids, return_inverse=True, return_counts=True)
    mode = np.array([data.row_a[inverse == j].mean() > 0.5 for j in range(len(pairs))], dtype=int)
    report = collapse.oracle_report(counts, cfg.oracle.d_z)
    assign = np.array(report["best_clustering"])
    # with both modes present and every cluster pure, the modes sit in different clusters
    separates = bool(report["best_objective"] < report["all_in_one_objective"] and len(set(mode)) == 2
                     and all(len(set(mode[assign == k])) == 1 for k in np.unique(assign)))
    rows = [{"pair": int(p), "bin_a": int(p // len(grid_b)), "bin_b": int(p % len(grid_b)), "count": int(c),
             "mode_a_first": int(mo), "cluster": int(a)} for p, c, mo, a in zip(pairs, counts, mode, assign)]
    write_csv(d / "oracle_pairs.csv", rows, ("pair", "bin_a", "bin_b", "count", "mode_a_first", "cluster"))
    out = {"counts": counts.tolist(), "pairs": pairs.tolist(), "mode_a_first": mode.tolist(), **report,
           "separates_modes": separates}
    write_json(d / "oracle.json", out)
    return out


def cmd_ablation(cfg, layout: Layout, args) -> dict:
    """Train (when missing), evaluate and analyse every variant for every seed."""
    per = []
    for seed in cfg.seeds:
        for variant in cfg.variants:
            if args.retrain or not layout.joint(variant, seed).exists():
                train_one_joint(cfg, layout, variant, seed)
            lat = latent_one(cfg, layout, variant, seed)
            for N in cfg.N_values:
                ev = eval_one(cfg, layout, variant, seed, N, cfg.K)
                per.append({"variant": variant, "seed": seed, "N": N, "minADE": ev["minADE"]["mean"],
                            "minFDE": ev["minFDE"]["mean"], "purity": lat["purity"],
                            "mi": lat["mutual_information"], "collapsed": lat["collapsed"]})
    table = []
    for variant in cfg.variants:
        for N in cfg.N_values:
            sel = [r for r in per if r["variant"] == variant and r["N"] == N]
            ade = experiment.summarize([r["minADE"] for r in sel])
            fde = experiment.summarize([r["minFDE"] for r in sel])
            table.append({"variant": variant, "N": N, "K": cfg.K, "minADE_mean": ade["mean"], "minADE_std": ade["std"],
                          "minFDE_mean": fde["mean"], "minFDE_std": fde["std"], "n_seeds": len(sel),
                          "purity_mean": float(np.mean([r["purity"] for r in sel])),
                          "mi_mean": float(np.mean([r["mi"] for r in sel])),
                          "collapsed_seeds": int(sum(r["collapsed"] for r in sel))})
    d = cfgmod.stamp(layout.dir("ablation"), cfg)
    write_csv(d / "ablation.csv", table, ABLATION_FIELDS)
    write_json(d / "ablation.json", {"table": table, "per_seed": per})
    return {"table": str(d / "ablation.csv"), "rows": table}


def latent_map_rows(cvae: JointCVAE, marginal: MarginalNet, context, variant: str, seed: int) -> list[dict]:
    """Decoded distribution of every latent over the unpruned goal-pair grid."""
    ctx = np.asarray(context, dtype=np.float64)[None]
    ma, mb = marginal.predict_batch(ctx)
    all_a = np.arange(len(cvae.grid_a))[None]
    all_b = np.arange(len(cvae.grid_b))[None]
    batch = cvae.make_batch(ctx, ma, mb, all_a, all_b)
    prior = cvae.prior(batch)[0]
    dec = cvae.decode(batch)[0]
    rows = []
    for z in range(cvae.d_z):
        for p, cand in enumerate(batch.cand[0]):
            ia, ib = divmod(int(cand), len(cvae.grid_b))
            rows.append({"variant": variant, "seed": seed, "z": z, "prior": float(prior[z]), "bin_a": ia, "bin_b": ib,
                         "goal_a": float(cvae.grid_a.centers[ia]), "goal_b": float(cvae.grid_b.centers[ib]),
                         "prob": float(dec[z, p])})
    return rows


def cmd_export_plots(cfg, layout: Layout, args) -> dict:
    """Render every figure whose inputs exist; each PNG sits next to its CSV."""
    from . import plotting

    d = cfgmod.stamp(layout.dir("plots"), cfg)
    made = []
    marginal = load_marginal(layout) if layout.model("marginal").exists() else None
    joints = [(v, s) for s in cfg.seeds for v in cfg.variants if layout.joint(v, s).exists()]
    if cfg.seed not in cfg.seeds:
        joints += [(v, cfg.seed) for v in cfg.variants if layout.joint(v, cfg.seed).exists()]
    seen = set()
    joints = [j for j in joints if not (j in seen or seen.add(j))]
    first_seed = {}
    for v, s in joints:
        first_seed.setdefault(v, s)
    if marginal is not None and first_seed:
        # equal headways: both orderings are equally likely
        context = (40.0, 8.5, 40.0, 8.5)
        rows = []
        for v, s in first_seed.items():
            rows += latent_map_rows(load_joint(layout, v, s), marginal, context, v, s)
        write_csv(d / "latent_maps.csv", rows, LATENT_MAP_FIELDS)
        made.append(str(plotting.plot_latent_maps(rows, d / "latent_maps.png")))
    logs = {}
    for v, s in joints:
        p = layout.dir("models") / f"joint_{v}_s{s}_log.csv"
        if p.exists():
            logs[f"{v} s{s}"] = read_csv(p)
    if logs:
        flat = [{"run": name, **r} for name, rows in logs.items() for r in rows]
        write_csv(d / "training_curves.csv", flat, ["run"] + _log_fields(flat))
        made.append(str(plotting.plot_training_curves(logs, d / "training_curves.png")))
    cal_rows = []
    for v, s in joints:
        p = layout.dir("latent") / f"calibration_{v}_s{s}.csv"
        if p.exists() and s == first_seed[v]:
            cal_rows += read_csv(p)
    if cal_rows:
        write_csv(d / "calibration.csv", cal_rows, CALIBRATION_FIELDS)
        made.append(str(plotting.plot_calibration(cal_rows, d / "calibration.png")))
    abl = layout.dir("ablation") / "ablation.csv"
    if abl.exists():
        rows = read_csv(abl)
        write_csv(d / "ablation.csv", rows, ABLATION_FIELDS)
        made.append(str(plotting.plot_ablation(rows, d / "ablation.png")))
    if not made:
        raise MissingArtifactError(2, "nothing to plot: no trained joint model or ablation table",
                                   str(layout.dir("models")))
    return {"figures": made}


def cmd_run_all(cfg, layout: Layout, args) -> dict:
    out = {}
    for name, fn in (("gen-data", cmd_gen_data), ("train-marginal", cmd_train_marginal),
                     ("train-completion", cmd_train_completion), ("ablation", cmd_ablation),
                     ("export-plots", cmd_export_plots)):
        out[name] = fn(cfg, layout, args)
    return out


COMMANDS = {
    "gen-data": (cmd_gen_data, "simulate the train, held-out and strong-interaction evaluation sets"),
    "train-marginal": (cmd_train_marginal, "train the per-agent goal classifier"),
    "train-completion": (cmd_train_completion, "train the goal-conditioned trajectory completion network"),
    "train-joint": (cmd_train_joint, "train one joint CVAE variant"),
    "eval": (cmd_eval, "joint minADE/minFDE of one trained variant"),
    "oracle": (cmd_oracle, "exhaustive clustering search of the zero-KL objective"),
    "analyze-latent": (cmd_analyze_latent, "collapse, purity and prior-calibration diagnostics"),
    "ablation": (cmd_ablation, "train/evaluate every variant over every seed and tabulate"),
    "export-plots": (cmd_export_plots, "write figure data as CSV and render PNGs next to it"),
    "run-all": (cmd_run_all, "gen-data, both base models, ablation and plots in sequence"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML or JSON experiment config")
    common.add_argument("--seed", type=int, help="experiment seed (unsigned)")
    common.add_argument("--out", help="output root directory")
    common.add_argument("--variant", choices=sorted(VARIANT_FAMILIES), default="full")
    common.add_argument("--N", type=int, help="goal-pair samples per scenario")
    common.add_argument("--K", type=int, help="predicted hypotheses per scenario")
    common.add_argument("--M", type=int, help="top-M bins kept per agent")
    parser = argparse.ArgumentParser(prog="goalpair-cvae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "oracle":
            p.add_argument("--counts", help="comma-separated goal-pair counts to search instead of simulating")
        if name in ("ablation", "run-all"):
            p.add_argument("--retrain", action="store_true", help="retrain joint models that already exist")
    return parser


def error_record(exc: BaseException) -> dict:
    rec = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, OSError) and exc.filename:
        rec["path"] = str(exc.filename)
        rec["message"] = exc.strerror or str(exc)
    return rec


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError(f"--seed must be non-negative, got {args.seed}")
        overrides = {"seed": args.seed, "out": args.out, "N": args.N, "K": args.K, "M": args.M}
        cfg = cfgmod.load_config(args.config, overrides)
        fn = COMMANDS[args.command][0]
        result = fn(cfg, Layout(cfg.out), args)
    except (ConfigError, MissingArtifactError, ContractError, TrainingError, OSError) as exc:
        code = next((c for t, c in EXIT_CODES.items() if isinstance(exc, t)), 1)
        print(json.dumps({**error_record(exc), "command": args.command, "exit_code": code}), file=sys.stderr)
        return code
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
