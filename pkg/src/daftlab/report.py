"""Report rendering: delimited summaries plus matplotlib figures.

Consumes the ``report.json`` documents persisted by the harness and turns
them into a CSV table (one row per algorithm) and PNG figures written next
to it.
"""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def load_run_report(run_dir: str) -> dict:
    with open(os.path.join(run_dir, "report.json")) as fh:
        return json.load(fh)


def write_summary_csv(reports: list[dict], path: str) -> None:
    fields = ["algorithm", "selection", "n_seeds",
              "id_mean", "id_std", "ood_mean", "ood_std"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for rep in reports:
            writer.writerow({
                "algorithm": rep["algorithm"],
                "selection": rep["selection"],
                "n_seeds": rep["n_seeds"],
                "id_mean": rep["id_accuracy"]["mean"],
                "id_std": rep["id_accuracy"]["std"],
                "ood_mean": rep["ood_accuracy"]["mean"],
                "ood_std": rep["ood_accuracy"]["std"],
            })


def write_comparisons_csv(comparisons: list[dict], path: str) -> None:
    fields = ["a", "b", "metric", "mean_a", "mean_b", "t", "p", "dof",
              "degenerate", "significant"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in comparisons:
            writer.writerow({k: row[k] for k in fields})


def render_accuracy_figure(reports: list[dict], path: str) -> None:
    """Grouped bar chart of ID / OOD accuracy (mean with std error bars)."""
    names = [rep["algorithm"] for rep in reports]
    idx = range(len(reports))
    id_means = [rep["id_accuracy"]["mean"] for rep in reports]
    id_stds = [rep["id_accuracy"]["std"] for rep in reports]
    ood_means = [rep["ood_accuracy"]["mean"] for rep in reports]
    ood_stds = [rep["ood_accuracy"]["std"] for rep in reports]
    width = 0.38
    fig, ax = plt.subplots(figsize=(1.6 * max(len(reports), 3) + 2, 4))
    ax.bar([i - width / 2 for i in idx], id_means, width, yerr=id_stds,
           capsize=3, label="ID accuracy")
    ax.bar([i + width / 2 for i in idx], ood_means, width, yerr=ood_stds,
           capsize=3, label="OOD accuracy")
    ax.set_xticks(list(idx))
    ax.set_xticklabels(names, rotation=20)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_seed_scatter(reports: list[dict], path: str) -> None:
    """Per-seed OOD accuracies, one column per algorithm."""
    fig, ax = plt.subplots(figsize=(1.2 * max(len(reports), 3) + 2, 4))
    for i, rep in enumerate(reports):
        ys = rep["ood_accuracy"]["per_seed"]
        ax.scatter([i] * len(ys), ys, alpha=0.8)
    ax.set_xticks(range(len(reports)))
    ax.set_xticklabels([rep["algorithm"] for rep in reports], rotation=20)
    ax.set_ylabel("OOD accuracy (per seed)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_report(run_dirs: list[str], out_dir: str, comparisons: list[dict] | None = None) -> dict:
    """Merge run directories into summary.csv plus PNG figures.

    Returns a manifest of the files written.
    """
    os.makedirs(out_dir, exist_ok=True)
    reports = [load_run_report(d) for d in run_dirs]
    summary_path = os.path.join(out_dir, "summary.csv")
    write_summary_csv(reports, summary_path)
    written = [summary_path]
    fig_path = os.path.join(out_dir, "accuracy.png")
    render_accuracy_figure(reports, fig_path)
    written.append(fig_path)
    scatter_path = os.path.join(out_dir, "ood_per_seed.png")
    render_seed_scatter(reports, scatter_path)
    written.append(scatter_path)
    if comparisons:
        cmp_path = os.path.join(out_dir, "comparisons.csv")
        write_comparisons_csv(comparisons, cmp_path)
        written.append(cmp_path)
    return {"files": written, "algorithms": [rep["algorithm"] for rep in reports]}
