"""Render run artifacts as figures plus delimited summaries.

Reads whatever stage outputs exist in the run directory and writes one PNG
and one CSV per artifact family into ``<out>/report/``.  Figures use the
Agg backend, so the command works headless.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from tsrate.pipeline import read_jsonl


def _write_csv(path: Path, header: list[str], rows) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _score_table_outputs(doc: dict, tag: str, report_dir: Path) -> list[Path]:
    criteria = sorted(doc["per_criterion"])
    fused = doc.get("fused") or doc.get("fused_union") or {}
    block_ids = sorted(
        set().union(*(set(v) for v in doc["per_criterion"].values()))
        | set(fused)
    )
    rows = []
    for bid in block_ids:
        row = [bid]
        for criterion in criteria:
            row.append(doc["per_criterion"][criterion].get(bid, ""))
        row.append(fused.get(bid, ""))
        rows.append(row)
    outputs = [
        _write_csv(
            report_dir / f"score_table_{tag}.csv",
            ["block_id", *criteria, "fused"],
            rows,
        )
    ]

    fig, axes = plt.subplots(1, len(criteria) + 1, figsize=(4 * (len(criteria) + 1), 3.2))
    for ax, criterion in zip(axes, criteria):
        values = list(doc["per_criterion"][criterion].values())
        ax.hist(values, bins=30, color="tab:blue", alpha=0.8)
        ax.set_title(criterion)
        ax.set_xlabel("score")
    axes[-1].hist(list(fused.values()), bins=30, color="tab:orange", alpha=0.8)
    axes[-1].set_title("fused")
    axes[-1].set_xlabel("score")
    axes[0].set_ylabel("blocks")
    fig.suptitle(f"Block score distributions ({tag})")
    fig.tight_layout()
    figure_path = report_dir / f"score_table_{tag}.png"
    fig.savefig(figure_path, dpi=120)
    plt.close(fig)
    outputs.append(figure_path)
    return outputs


def _selection_outputs(scores_doc: dict, selection_doc: dict | None, report_dir: Path) -> list[Path]:
    items = sorted(scores_doc["scores"].items(), key=lambda kv: (-kv[1], kv[0]))
    selected = set(selection_doc["selected_ids"]) if selection_doc else set()
    rows = [
        [rank, sid, score, int(sid in selected)]
        for rank, (sid, score) in enumerate(items, start=1)
    ]
    outputs = [
        _write_csv(
            report_dir / "sample_scores.csv",
            ["rank", "sample_id", "score", "selected"],
            rows,
        )
    ]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ranks = [r[0] for r in rows]
    values = [r[2] for r in rows]
    ax.plot(ranks, values, color="tab:gray", lw=1.0, label="ranked sample score")
    if selected:
        cut = len(selected)
        ax.axvline(cut + 0.5, color="tab:red", ls="--", label=f"selection cutoff (top {cut})")
    ax.set_xlabel("rank")
    ax.set_ylabel("fused sample score")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    figure_path = report_dir / "sample_scores.png"
    fig.savefig(figure_path, dpi=120)
    plt.close(fig)
    outputs.append(figure_path)
    return outputs


def _meta_metrics_outputs(rows: list[dict], report_dir: Path) -> list[Path]:
    outputs = [
        _write_csv(
            report_dir / "meta_metrics.csv",
            ["epoch", "criterion", "mean_query_loss", "mean_support_loss"],
            [
                [r["epoch"], r.get("criterion", ""), r["mean_query_loss"], r["mean_support_loss"]]
                for r in rows
            ],
        )
    ]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    by_criterion: dict[str, list[tuple[int, float]]] = {}
    for r in rows:
        by_criterion.setdefault(r.get("criterion") or "all", []).append(
            (r["epoch"], r["mean_query_loss"])
        )
    for criterion, points in sorted(by_criterion.items()):
        points.sort()
        ax.plot([p[0] for p in points], [p[1] for p in points], marker="o", label=criterion)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean query loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    figure_path = report_dir / "meta_metrics.png"
    fig.savefig(figure_path, dpi=120)
    plt.close(fig)
    outputs.append(figure_path)
    return outputs


def _prune_outputs(doc: dict, report_dir: Path) -> list[Path]:
    steps = doc["steps"]
    outputs = [
        _write_csv(
            report_dir / "prune_schedule.csv",
            ["fraction", "n_removed", "n_retained"],
            [[s["fraction"], s["n_removed"], len(s["retained_ids"])] for s in steps],
        )
    ]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(
        [s["fraction"] for s in steps],
        [len(s["retained_ids"]) for s in steps],
        marker="s",
        color="tab:green",
    )
    ax.set_xlabel("removed fraction")
    ax.set_ylabel("retained samples")
    ax.set_title(f"Pruning schedule ({doc.get('direction', 'best_first')})")
    fig.tight_layout()
    figure_path = report_dir / "prune_schedule.png"
    fig.savefig(figure_path, dpi=120)
    plt.close(fig)
    outputs.append(figure_path)
    return outputs


def render_report(out_dir) -> list[Path]:
    """Render everything present in ``out_dir``; returns written paths."""
    out_dir = Path(out_dir)
    report_dir = out_dir / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    for tag in ("bt", "rater"):
        table_path = out_dir / f"score_table_{tag}.json"
        if table_path.exists():
            with open(table_path, encoding="utf-8") as fh:
                written.extend(_score_table_outputs(json.load(fh), tag, report_dir))

    scores_path = out_dir / "sample_scores.json"
    if scores_path.exists():
        with open(scores_path, encoding="utf-8") as fh:
            scores_doc = json.load(fh)
        selection_doc = None
        selection_path = out_dir / "selection.json"
        if selection_path.exists():
            with open(selection_path, encoding="utf-8") as fh:
                selection_doc = json.load(fh)
        written.extend(_selection_outputs(scores_doc, selection_doc, report_dir))

    metrics_path = out_dir / "meta_metrics.jsonl"
    if metrics_path.exists():
        rows = list(read_jsonl(metrics_path))
        if rows:
            written.extend(_meta_metrics_outputs(rows, report_dir))

    prune_path = out_dir / "prune_schedule.json"
    if prune_path.exists():
        with open(prune_path, encoding="utf-8") as fh:
            written.extend(_prune_outputs(json.load(fh), report_dir))

    if not written:
        raise FileNotFoundError(
            f"nothing to report on in {out_dir}; run score/select/meta-train first"
        )
    return written
