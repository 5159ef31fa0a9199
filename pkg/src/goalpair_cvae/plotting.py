"""Figures rendered next to the CSV files they are drawn from.

Every function takes plain rows (the same dictionaries written to CSV) so a
figure can be regenerated from the exported data alone.
"""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_latent_maps(rows: list[dict], path) -> Path:
    """Decoded goal-pair distribution per latent, one panel per (variant, z).

    ``rows`` carry ``variant, z, prior, bin_a, bin_b, prob``.
    """
    panels: dict[tuple[str, int], list[dict]] = defaultdict(list)
    for r in rows:
        panels[(r["variant"], int(r["z"]))].append(r)
    variants = list(dict.fromkeys(k[0] for k in panels))
    n_z = max(k[1] for k in panels) + 1
    fig, axes = plt.subplots(len(variants), n_z, figsize=(3.2 * n_z, 3.0 * len(variants)), squeeze=False,
                             constrained_layout=True)
    for i, variant in enumerate(variants):
        for z in range(n_z):
            ax = axes[i, z]
            cells = panels.get((variant, z), [])
            if not cells:
                ax.axis("off")
                continue
            na = max(int(c["bin_a"]) for c in cells) + 1
            nb = max(int(c["bin_b"]) for c in cells) + 1
            img = np.zeros((na, nb))
            for c in cells:
                img[int(c["bin_a"]), int(c["bin_b"])] = float(c["prob"])
            ax.imshow(img.T, origin="lower", cmap="viridis", aspect="auto")
            ax.set_title(f"{variant}  z={z}  p(z)={float(cells[0]['prior']):.2f}", fontsize=9)
            ax.set_xlabel("goal bin A")
            ax.set_ylabel("goal bin B")
    return _save(fig, path)


def plot_training_curves(logs: dict[str, list[dict]], path, keys=("recon", "kl")) -> Path:
    fig, axes = plt.subplots(1, len(keys), figsize=(4.5 * len(keys), 3.2), squeeze=False,
                             constrained_layout=True)
    for ax, key in zip(axes[0], keys):
        for name, rows in logs.items():
            pts = [(float(r["step"]), float(r[key])) for r in rows if r.get(key) not in (None, "")]
            if pts:
                ax.plot(*zip(*pts), label=name)
        ax.set_xlabel("step")
        ax.set_ylabel(key)
        ax.grid(alpha=0.3)
    axes[0, 0].legend(fontsize=7)
    return _save(fig, path)


def plot_ablation(rows: list[dict], path, metric: str = "minFDE") -> Path:
    """Grouped bars of ``<metric>_mean`` with ``<metric>_std`` error bars, grouped by N."""
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    ns = sorted({int(r["N"]) for r in rows})
    width = 0.8 / max(1, len(variants))
    fig, ax = plt.subplots(figsize=(1.8 + 1.6 * len(ns), 3.4))
    for j, variant in enumerate(variants):
        means, stds = [], []
        for n in ns:
            match = [r for r in rows if r["variant"] == variant and int(r["N"]) == n]
            means.append(float(match[0][f"{metric}_mean"]) if match else np.nan)
            stds.append(float(match[0][f"{metric}_std"]) if match else 0.0)
        ax.bar(np.arange(len(ns)) + j * width, means, width, yerr=stds, capsize=3, label=variant)
    ax.set_xticks(np.arange(len(ns)) + width * (len(variants) - 1) / 2)
    ax.set_xticklabels([f"N={n}" for n in ns])
    ax.set_ylabel(f"joint {metric}")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_calibration(rows: list[dict], path) -> Path:
    """Prior mass on the A-first latents against the simulator's p_A."""
    fig, ax = plt.subplots(figsize=(3.8, 3.6))
    for variant in dict.fromkeys(r["variant"] for r in rows):
        pts = sorted((float(r["p_a"]), float(r["prior_mass"])) for r in rows if r["variant"] == variant)
        ax.plot(*zip(*pts), marker="o", ms=3, label=variant)
    ax.plot([0, 1], [0, 1], "k--", lw=0.8)
    ax.set_xlabel("p_A")
    ax.set_ylabel("prior mass on A-first latents")
    ax.legend(fontsize=8)
    return _save(fig, path)
