"""Plot data as CSV plus a static PNG per figure."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .data import Dataset, SparsityGrouping  # noqa: E402
from .metrics import METRICS, MetricsReport, group_report  # noqa: E402


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _fmt(value) -> str:
    return "" if value is None else repr(float(value))


def write_group_sizes(out_dir: str | Path, dataset: Dataset, grouping: SparsityGrouping) -> Path:
    """fig1_groups.csv: users and search interactions per sparsity group."""
    out_dir = Path(out_dir)
    labels = grouping.labels()
    rows = []
    for g in range(grouping.num_groups):
        members = grouping.members(g)
        rows.append([g, labels[g], len(members), sum(dataset.users[u].n_search for u in members)])
    path = _write_csv(out_dir / "fig1_groups.csv", ["group", "label", "users", "search_interactions"], rows)

    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar([r[1] for r in rows], [r[2] for r in rows])
    ax.set_xlabel("search interactions per user")
    ax.set_ylabel("users")
    fig.tight_layout()
    fig.savefig(path.with_suffix(".png"))
    plt.close(fig)
    return path


def write_improvements(out_dir: str | Path, reports: Mapping[str, MetricsReport], baseline: str = "baseline") -> Path:
    """fig2_improvements.csv: relative change of every report over ``baseline`` per group."""
    out_dir = Path(out_dir)
    base = reports[baseline]
    rows = []
    for name, report in reports.items():
        if name == baseline:
            continue
        for entry in group_report(base, report):
            imp = entry["improvements"] or {}
            rows.append([name, entry["group"], entry["label"], int(entry["empty"])] + [_fmt(imp.get(m)) for m in METRICS])
    path = _write_csv(out_dir / "fig2_improvements.csv", ["run", "group", "label", "empty", *METRICS], rows)

    fig, ax = plt.subplots(figsize=(6, 3))
    names = sorted({r[0] for r in rows})
    labels = [r[2] for r in rows if r[0] == names[0]] if names else []
    width = 0.8 / max(len(names), 1)
    ndcg5 = METRICS.index("NDCG@5") + 4
    for k, name in enumerate(names):
        vals = [float(r[ndcg5]) if r[ndcg5] else 0.0 for r in rows if r[0] == name]
        ax.bar([i + k * width for i in range(len(vals))], vals, width=width, label=name)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(labels))], labels)
    ax.axhline(0.0, color="black", linewidth=0.5)
    ax.set_ylabel(f"relative NDCG@5 vs {baseline}")
    if names:
        ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path.with_suffix(".png"))
    plt.close(fig)
    return path


def write_sweep(out_dir: str | Path, param: str, points: Sequence[Mapping]) -> Path:
    """fig7_<param>.csv: NDCG@5 and HR@5 against the swept value."""
    out_dir = Path(out_dir)
    rows = [[p["value"], p["NDCG@5"], p["HR@5"]] for p in points]
    path = _write_csv(out_dir / f"fig7_{param}.csv", ["value", "NDCG@5", "HR@5"], rows)

    fig, ax = plt.subplots(figsize=(5, 3))
    xs = [str(r[0]) for r in rows]
    ax.plot(xs, [r[1] for r in rows], marker="o", label="NDCG@5")
    ax.plot(xs, [r[2] for r in rows], marker="s", label="HR@5")
    ax.set_xlabel(param)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path.with_suffix(".png"))
    plt.close(fig)
    return path
