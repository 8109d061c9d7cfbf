#metrics reports to table text, csv records and summary json
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from compseg.services.metrics import MetricsReport


@dataclass
class ReportEntry:
    """One evaluated checkpoint: a table row label, its label fraction and scores."""

    method: str
    label_fraction: float
    report: MetricsReport


def format_cell(mean: Optional[float], std: Optional[float]) -> str:
    if mean is None:
        return "n/a"
    if std is None:
        return f"{mean:.2f}"
    spread = f"{std:.2g}"
    # two significant digits, but never exponent notation
    if "e" in spread:
        spread = f"{std:.0f}"
    return f"{mean:.2f}_{spread}"


def _fraction_label(fraction: float) -> str:
    return f"{fraction * 100:g}%"


def format_table(entries: Sequence[ReportEntry]) -> str:
    """
    Whole-tumour runs: one row per method, Dice columns then HD95 columns,
    one per label fraction. Sub-region runs: one row per method/fraction,
    a Dice and HD95 column per class.
    """
    if not entries:
        return ""
    task_modes = {e.report.task_mode for e in entries}
    if len(task_modes) != 1:
        raise ValueError(f"cannot tabulate mixed task modes {sorted(task_modes)}")

    if task_modes == {"whole"}:
        fractions = sorted({e.label_fraction for e in entries})
        header = ["Method"] + [f"Dice {_fraction_label(f)}" for f in fractions] + [f"HD95 {_fraction_label(f)}" for f in fractions]
        rows: Dict[str, Dict[str, str]] = {}
        for e in entries:
            agg = e.report.aggregate["WT"]
            row = rows.setdefault(e.method, {})
            row[f"Dice {_fraction_label(e.label_fraction)}"] = format_cell(agg.dice_mean, agg.dice_std)
            row[f"HD95 {_fraction_label(e.label_fraction)}"] = format_cell(agg.hd_mean, agg.hd_std)
        body = [[method] + [cells.get(col, "-") for col in header[1:]] for method, cells in rows.items()]
    else:
        classes = entries[0].report.classes
        header = ["Method"] + [f"{c} {m}" for c in classes for m in ("Dice", "HD95")]
        body = []
        for e in entries:
            cells = [f"{e.method} ({_fraction_label(e.label_fraction)})"]
            for c in classes:
                agg = e.report.aggregate[c]
                cells += [format_cell(agg.dice_mean, agg.dice_std), format_cell(agg.hd_mean, agg.hd_std)]
            body.append(cells)

    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(row) + " |" for row in body]
    return "\n".join(lines)


def metric_records(entries: Sequence[ReportEntry]) -> List[Dict[str, object]]:
    """One record per (entry, volume, class)."""
    records = []
    for e in entries:
        for subject_id, scores in e.report.per_volume.items():
            for c in e.report.classes:
                records.append({
                    "method": e.method,
                    "label_fraction": e.label_fraction,
                    "subject_id": subject_id,
                    "class": c,
                    "dice": scores[c].dice_percent,
                    "hd95": "" if scores[c].hd95 is None else scores[c].hd95,
                })
    return records


def summary(entries: Sequence[ReportEntry]) -> List[Dict[str, object]]:
    return [
        {
            "method": e.method,
            "label_fraction": e.label_fraction,
            "task_mode": e.report.task_mode,
            "mean_dice": e.report.mean_dice,
            "classes": {
                c: {
                    "dice_mean": a.dice_mean,
                    "dice_std": a.dice_std,
                    "hd95_mean": a.hd_mean,
                    "hd95_std": a.hd_std,
                    "hd95_excluded": a.hd_excluded,
                }
                for c, a in e.report.aggregate.items()
            },
        }
        for e in entries
    ]


def write_reports(entries: Sequence[ReportEntry], out_dir: Path) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "table": out_dir / "report.txt",
        "csv": out_dir / "metrics.csv",
        "summary": out_dir / "summary.json",
    }
    paths["table"].write_text(format_table(entries) + "\n", encoding="utf-8")
    with paths["csv"].open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["method", "label_fraction", "subject_id", "class", "dice", "hd95"])
        writer.writeheader()
        writer.writerows(metric_records(entries))
    paths["summary"].write_text(json.dumps(summary(entries), indent=2), encoding="utf-8")
    return paths
