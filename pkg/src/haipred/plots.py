"""Static SVG renderings of the evaluation report."""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "haipred"

import matplotlib.pyplot as plt
import numpy as np

from .metrics import AveragedROC, DualLabelConfusion, LOSComparison

_SVG_METADATA = {"Date": None}


def plot_averaged_roc(avg: AveragedROC, path: str | Path, title: str = "Averaged ROC") -> Path:
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(avg.fpr_grid, avg.mean_tpr, color="tab:blue", label=f"mean of {avg.n_curves} curves")
    ax.fill_between(avg.fpr_grid, avg.ci_low, avg.ci_high, color="tab:blue", alpha=0.2, label="95% CI")
    ax.plot([0, 1], [0, 1], linestyle="--", color="grey", linewidth=0.8)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title(title)
    ax.legend(loc="lower right")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=_SVG_METADATA)
    plt.close(fig)
    return path


def plot_los_histograms(cmp: LOSComparison, path: str | Path) -> Path:
    bins = sorted(set(cmp.case_histogram) | set(cmp.control_histogram))
    case = [cmp.case_histogram.get(b, 0) for b in bins]
    control = [cmp.control_histogram.get(b, 0) for b in bins]
    x = np.arange(len(bins))
    width = 0.4
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(x - width / 2, case, width, label="infected", color="tab:red")
    ax.bar(x + width / 2, control, width, label="control", color="tab:blue")
    ax.set_xticks(x)
    ax.set_xticklabels([str(b) for b in bins], rotation=90, fontsize=7)
    ax.set_xlabel(f"Length of stay ({cmp.bin_hours:.0f}h bins)")
    ax.set_ylabel("Stays")
    ax.set_title("LOS distribution by class")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=_SVG_METADATA)
    plt.close(fig)
    return path


def plot_confusion_heatmap(conf: DualLabelConfusion, path: str | Path) -> Path:
    """Two 2x2 panels: samples split by the other label within each prediction."""
    grid = np.zeros((2, 4))
    combos = [(True, True), (True, False), (False, True), (False, False)]
    for col, (vap, iri) in enumerate(combos):
        grid[0, col] = conf.count(True, vap, iri)
        grid[1, col] = conf.count(False, vap, iri)
    fig, ax = plt.subplots(figsize=(6, 3.2))
    im = ax.imshow(grid, cmap="Blues")
    for r in range(2):
        for c in range(4):
            ax.text(c, r, int(grid[r, c]), ha="center", va="center", fontsize=9)
    ax.set_yticks([0, 1])
    ax.set_yticklabels(["pred +", "pred -"])
    ax.set_xticks(range(4))
    ax.set_xticklabels(["VAP+/IRI+", "VAP+/IRI-", "VAP-/IRI+", "VAP-/IRI-"], fontsize=8)
    ax.set_title(f"Prediction vs dual labels (threshold {conf.threshold:.3g})")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=_SVG_METADATA)
    plt.close(fig)
    return path


def render_report_plots(report, out_dir: str | Path) -> list[Path]:
    """Render every plot the report has data for; returns written paths."""
    from .evaluate import EvalReport  # local import to avoid cycles

    assert isinstance(report, EvalReport)
    out_dir = Path(out_dir)
    written = []
    for label, payload in sorted(report.averaged_roc.items()):
        avg = AveragedROC(
            fpr_grid=np.asarray(payload["fpr_grid"]),
            mean_tpr=np.asarray(payload["mean_tpr"]),
            ci_low=np.asarray(payload["ci_low"]),
            ci_high=np.asarray(payload["ci_high"]),
            n_curves=payload["n_curves"],
            effective_n_pos=payload["effective_n_pos"],
        )
        written.append(
            plot_averaged_roc(avg, out_dir / f"roc_{label.lower()}.svg", f"Averaged ROC ({label} labels)")
        )
    if report.los is not None:
        written.append(plot_los_histograms(report.los, out_dir / "los_histograms.svg"))
    confusions = [s.confusion for s in report.successful if s.confusion is not None]
    if confusions:
        written.append(plot_confusion_heatmap(confusions[0], out_dir / "confusion_heatmap.svg"))
    return written
