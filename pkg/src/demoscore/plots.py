"""Matplotlib figures written next to the CSV report files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}

METHOD_COLORS = {  # also the legend order
    "base": "#7f7f7f",
    "auto_il": "#1f77b4",
    "rcp": "#9467bd",
    "loss_weighting": "#8c564b",
    "demo_score": "#d62728",
}


def _cell(report) -> str:
    return report.mixture if report.variant == "original" else f"{report.variant}\n{report.mixture}"


def plot_success(reports, path: Path) -> Path:
    """Pooled final success per method with 90% Wilson error bars, one group per report."""
    methods = [m for m in METHOD_COLORS if any(m in r.methods for r in reports)]
    cells = [_cell(r) for r in reports]
    width = 0.8 / max(1, len(methods))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(cells) + 1.5), 3.0))
        for j, m in enumerate(methods):
            xs, ys, lo, hi = [], [], [], []
            for i, r in enumerate(reports):
                if m not in r.methods:
                    continue
                p = r.methods[m]["pooled_final"]
                xs.append(i + (j - (len(methods) - 1) / 2) * width)
                ys.append(p["p_hat"])
                lo.append(p["p_hat"] - p["lo"])
                hi.append(p["hi"] - p["p_hat"])
            ax.bar(xs, ys, width, yerr=[lo, hi], capsize=2, color=METHOD_COLORS[m], label=m)
        ax.set_xticks(range(len(cells)))
        ax.set_xticklabels(cells)
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("success rate")
        ax.legend(ncol=min(5, len(methods)), loc="lower center", bbox_to_anchor=(0.5, 1.0), frameon=False)
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_checkpoint_curves(reports, path: Path) -> Path:
    """Seed-averaged success at each checkpoint of the initial and final runs."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(reports), figsize=(3.2 * len(reports), 2.6), squeeze=False)
        for ax, r in zip(axes[0], reports):
            for m, block in sorted(r.methods.items(), key=lambda kv: list(METHOD_COLORS).index(kv[0])):
                recs = block["per_seed"]
                steps = recs[0]["ckpt_steps"]
                curve = np.mean([[s["p_hat"] for s in rec["ckpt_success"]] for rec in recs], axis=0)
                ax.plot(steps, curve, marker="o", ms=3, color=METHOD_COLORS.get(m, "k"), label=m)
            ax.set_title(_cell(r).replace("\n", " "))
            ax.set_xlabel("training step")
            ax.set_ylim(0, 1.05)
        axes[0][0].set_ylabel("success rate")
        axes[0][-1].legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_composition(reports, path: Path) -> Path | None:
    """Kept vs discarded demos per strategy, summed over seeds."""
    rows = []
    for r in reports:
        if "demo_score" not in r.methods:
            continue
        totals: dict[str, list[int]] = {}
        for rec in r.methods["demo_score"]["per_seed"]:
            for tag, c in rec["curation"]["composition"].items():
                t = totals.setdefault(tag, [0, 0])
                t[0] += c["kept"]
                t[1] += c["discarded"]
        rows.append((_cell(r), totals))
    if not rows:
        return None
    tags = sorted({t for _, tot in rows for t in tot})
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 1.0 * len(rows) * len(tags) + 1.0), 3.0))
        labels, kept, disc = [], [], []
        for cell, tot in rows:
            for tag in tags:
                k, d = tot.get(tag, [0, 0])
                labels.append(f"{tag}\n{cell}")
                kept.append(k)
                disc.append(d)
        x = np.arange(len(labels))
        ax.bar(x, kept, color="#2ca02c", label="kept")
        ax.bar(x, disc, bottom=kept, color="#d62728", alpha=0.7, label="discarded")
        ax.set_xticks(x)
        ax.set_xticklabels(labels, fontsize=6)
        ax.set_ylabel("demos (all seeds)")
        ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)
    return path


def render_figures(reports, out_dir) -> list[Path]:
    out = Path(out_dir)
    paths = [plot_success(reports, out / "success.png"), plot_checkpoint_curves(reports, out / "checkpoint_curves.png")]
    comp = plot_composition(reports, out / "composition.png")
    if comp is not None:
        paths.append(comp)
    return paths
