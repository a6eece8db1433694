"""Report rendering: delimited metric tables plus matplotlib figures.

Every writer here is byte-deterministic for fixed inputs: JSON is dumped
with sorted keys, tables use fixed float formats, and PNG metadata that
would vary between runs is stripped.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .activation import ActivationResult
from .lattice import ExpertSpec
from .metrics import MetricReport, TABLE_CLASS_LABELS, TABLE_CLASS_ORDER, format_report_table
from .trajectory import VirtualCohort
from .volume import FOREGROUND_CLASSES, CLASS_NAMES


def save_figure(fig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def write_json(data: dict, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# metric tables
# ---------------------------------------------------------------------------


def metrics_tsv(rows: Mapping[str, MetricReport]) -> str:
    header = (
        ["case"]
        + [f"dice_{TABLE_CLASS_LABELS[c].lower()}" for c in TABLE_CLASS_ORDER]
        + ["dice_avg"]
        + [f"hd95_{TABLE_CLASS_LABELS[c].lower()}_mm" for c in TABLE_CLASS_ORDER]
        + ["hd95_avg_mm"]
    )
    lines = ["\t".join(header)]
    for name, report in rows.items():
        lines.append(
            "\t".join(
                [name]
                + [f"{report.dice[c]:.6f}" for c in TABLE_CLASS_ORDER]
                + [f"{report.dice_avg:.6f}"]
                + [f"{report.hd95_mm[c]:.6f}" for c in TABLE_CLASS_ORDER]
                + [f"{report.hd95_avg:.6f}"]
            )
        )
    return "\n".join(lines) + "\n"


def write_metric_outputs(
    reports_dir: Union[str, Path],
    rows: Mapping[str, MetricReport],
    extra: Optional[dict] = None,
) -> dict[str, Path]:
    """Write metrics.json / metrics.tsv / metrics.txt plus summary figures."""
    reports_dir = Path(reports_dir)
    reports_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "cases": {name: report.to_json_dict() for name, report in rows.items()},
        "summary": summarize_reports(rows),
    }
    if extra:
        payload.update(extra)
    outputs = {
        "json": write_json(payload, reports_dir / "metrics.json"),
        "tsv": (reports_dir / "metrics.tsv"),
        "txt": (reports_dir / "metrics.txt"),
    }
    outputs["tsv"].write_text(metrics_tsv(rows))
    outputs["txt"].write_text(format_report_table(rows))
    if rows:
        outputs["dice_figure"] = save_figure(
            _per_case_bars(rows, "dice"), reports_dir / "figures" / "dice_by_case.png"
        )
        outputs["hd95_figure"] = save_figure(
            _per_case_bars(rows, "hd95"), reports_dir / "figures" / "hd95_by_case.png"
        )
    return outputs


def summarize_reports(rows: Mapping[str, MetricReport]) -> dict:
    if not rows:
        return {}
    summary: dict = {}
    for c in TABLE_CLASS_ORDER:
        name = TABLE_CLASS_LABELS[c].lower()
        summary[f"dice_{name}"] = float(np.mean([r.dice[c] for r in rows.values()]))
        summary[f"hd95_{name}_mm"] = float(np.mean([r.hd95_mm[c] for r in rows.values()]))
    summary["dice_avg"] = float(np.mean([r.dice_avg for r in rows.values()]))
    summary["hd95_avg_mm"] = float(np.mean([r.hd95_avg for r in rows.values()]))
    return summary


def _per_case_bars(rows: Mapping[str, MetricReport], kind: str):
    names = list(rows)
    fig, ax = plt.subplots(figsize=(max(6.0, 0.7 * len(names) + 2), 4.0))
    x = np.arange(len(names))
    width = 0.25
    for i, c in enumerate(TABLE_CLASS_ORDER):
        if kind == "dice":
            values = [rows[n].dice[c] for n in names]
        else:
            values = [rows[n].hd95_mm[c] for n in names]
        ax.bar(x + (i - 1) * width, values, width, label=TABLE_CLASS_LABELS[c])
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("Dice" if kind == "dice" else "HD95 (mm)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return fig


# ---------------------------------------------------------------------------
# trajectory and activation figures
# ---------------------------------------------------------------------------


def severity_mapping_figure(cohort: VirtualCohort):
    """Raw vs repaired severity along each segment plus the resampled weights."""
    n = len(cohort.segments)
    fig, axes = plt.subplots(1, n, figsize=(4.0 * n, 3.2), squeeze=False)
    for ax, record in zip(axes[0], cohort.segments):
        omegas = np.asarray(record.mapping_omegas)
        ax.plot(omegas, record.mapping_gammas_raw, ".", ms=3, color="#888888", label="probed")
        ax.plot(omegas, record.mapping_gammas, "-", lw=1.2, color="#1f77b4", label="monotone")
        stars = np.asarray(record.omega_stars)
        targets = np.linspace(record.mapping_gammas[0], record.mapping_gammas[-1], record.n_samples)
        ax.plot(stars, targets, "x", ms=5, color="#d62728", label="resampled")
        ax.set_xlabel("path weight")
        ax.set_ylabel("severity")
        ax.set_title(f"{cohort.pathology.value} segment {record.index}", fontsize=9)
        ax.legend(fontsize=7)
    fig.tight_layout()
    return fig


def activation_heatmap_figure(result: ActivationResult, case_name: str):
    """Proxy-score heatmaps over (granularity, interleaving), one row per phase."""
    specs = sorted(result.scores)
    granularities = sorted({s.delta_gamma for s in specs})
    interleavings = sorted({s.alpha for s in specs})
    phases = sorted({s.phase for s in specs})
    fig, axes = plt.subplots(
        len(phases),
        len(FOREGROUND_CLASSES),
        figsize=(3.4 * len(FOREGROUND_CLASSES), 2.6 * len(phases)),
        squeeze=False,
    )
    for pi, phase in enumerate(phases):
        for ci, c in enumerate(FOREGROUND_CLASSES):
            grid = np.full((len(interleavings), len(granularities)), np.nan)
            for spec in specs:
                if spec.phase != phase:
                    continue
                row = interleavings.index(spec.alpha)
                col = granularities.index(spec.delta_gamma)
                grid[row, col] = result.scores[spec][c]
            ax = axes[pi][ci]
            im = ax.imshow(grid, origin="lower", aspect="auto", vmin=0.0, vmax=1.0, cmap="viridis")
            ax.set_xticks(range(len(granularities)))
            ax.set_xticklabels([f"{d:g}" for d in granularities], fontsize=6)
            ax.set_yticks(range(len(interleavings)))
            ax.set_yticklabels([str(a) for a in interleavings], fontsize=6)
            ax.set_xlabel("granularity", fontsize=7)
            ax.set_ylabel("interleaving", fontsize=7)
            ax.set_title(f"{case_name} {CLASS_NAMES[c]} ({phase})", fontsize=8)
            chosen = result.selected[c]
            if chosen.phase == phase:
                ax.plot(
                    granularities.index(chosen.delta_gamma),
                    interleavings.index(chosen.alpha),
                    "r*",
                    ms=10,
                )
            fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    return fig


def cell_dice_figure(cell_scores: Mapping[ExpertSpec, float], title: str):
    """Mean Dice per lattice cell as heatmaps, one per phase."""
    specs = sorted(cell_scores)
    granularities = sorted({s.delta_gamma for s in specs})
    interleavings = sorted({s.alpha for s in specs})
    phases = sorted({s.phase for s in specs})
    fig, axes = plt.subplots(1, len(phases), figsize=(4.2 * len(phases), 3.2), squeeze=False)
    for pi, phase in enumerate(phases):
        grid = np.full((len(interleavings), len(granularities)), np.nan)
        for spec in specs:
            if spec.phase != phase:
                continue
            grid[interleavings.index(spec.alpha), granularities.index(spec.delta_gamma)] = cell_scores[spec]
        ax = axes[0][pi]
        im = ax.imshow(grid, origin="lower", aspect="auto", cmap="magma")
        ax.set_xticks(range(len(granularities)))
        ax.set_xticklabels([f"{d:g}" for d in granularities], fontsize=6)
        ax.set_yticks(range(len(interleavings)))
        ax.set_yticklabels([str(a) for a in interleavings], fontsize=6)
        ax.set_xlabel("granularity", fontsize=7)
        ax.set_ylabel("interleaving", fontsize=7)
        ax.set_title(f"{title} ({phase})", fontsize=9)
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    return fig
