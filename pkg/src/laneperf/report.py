from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from rich import box
from rich.console import Console
from rich.table import Table

from .audit import atomic_write_text
from .harness import DISPLAY_NAMES, EvalReport, ReportRow, mae, spearman

ROW_COLUMNS = ("method", "dataset_id", "family", "group", "actual_f1", "estimated_f1", "abs_error", "vacuous")
AGGREGATE_COLUMNS = ("method", "mae", "rho", "n", "flags")

Cell = Tuple[Optional[float], Optional[float]]  # (MAE, rho)


@dataclass(frozen=True)
class TableLine:
    label: str
    kind: str  # family | group | all-rows | all-groups | pooled
    cells: Dict[str, Cell]


def _family_cell(rows: List[ReportRow]) -> Cell:
    err = mae([r.actual_f1 for r in rows], [r.estimated_f1 for r in rows])
    if len(rows) < 2:
        return err, None
    corr = spearman([r.actual_f1 for r in rows], [r.estimated_f1 for r in rows])
    return err, (None if corr.constant else corr.rho)


def _mean_cells(lines: List[TableLine], methods: List[str]) -> Dict[str, Cell]:
    out: Dict[str, Cell] = {}
    for m in methods:
        maes = [ln.cells[m][0] for ln in lines if ln.cells[m][0] is not None]
        rhos = [ln.cells[m][1] for ln in lines if ln.cells[m][1] is not None]
        out[m] = (float(np.mean(maes)) if maes else None, float(np.mean(rhos)) if rhos else None)
    return out


def table_lines(report: EvalReport) -> List[TableLine]:
    """
    One line per target family, grouped by domain-shift type, then the per-group
    averages, the average over family lines, the average over group lines and the
    pooled aggregates.
    """
    methods = report.methods
    families: Dict[Tuple[str, str], Dict[str, List[ReportRow]]] = {}
    for r in report.rows:
        families.setdefault((r.group, r.family), {}).setdefault(r.method, []).append(r)

    family_lines: Dict[str, List[TableLine]] = {}
    for (group, family) in sorted(families):
        per_method = families[(group, family)]
        cells = {m: _family_cell(per_method[m]) for m in methods}
        family_lines.setdefault(group, []).append(TableLine(family, "family", cells))

    lines: List[TableLine] = []
    group_lines: List[TableLine] = []
    for group, flines in family_lines.items():
        lines.extend(flines)
        avg = TableLine(f"{group} Avg.", "group", _mean_cells(flines, methods))
        group_lines.append(avg)
        lines.append(avg)
    all_family = [ln for fl in family_lines.values() for ln in fl]
    lines.append(TableLine("All Avg. (rows)", "all-rows", _mean_cells(all_family, methods)))
    lines.append(TableLine("All Avg. (groups)", "all-groups", _mean_cells(group_lines, methods)))
    lines.append(TableLine(
        "Pooled", "pooled", {m: (report.aggregates[m].mae, report.aggregates[m].rho) for m in methods}))
    return lines


def _fmt(x: Optional[float]) -> str:
    return "-" if x is None else f"{x:.3f}"


def render_table(report: EvalReport, title: str = "Performance estimation: MAE (lower) / rho (higher)") -> str:
    methods = report.methods
    table = Table(title=title, box=box.ASCII, show_lines=False)
    table.add_column("Target")
    for m in methods:
        name = DISPLAY_NAMES.get(m, m)
        table.add_column(f"{name} MAE", justify="right")
        table.add_column(f"{name} rho", justify="right")

    for ln in table_lines(report):
        cells = []
        for m in methods:
            cells.extend([_fmt(ln.cells[m][0]), _fmt(ln.cells[m][1])])
        style = None if ln.kind == "family" else "bold"
        end_section = ln.kind in ("group", "all-groups")
        table.add_row(ln.label, *cells, style=style, end_section=end_section)

    console = Console(file=io.StringIO(), record=True, width=max(100, 24 + 22 * len(methods)))
    console.print(table)
    notes = []
    for m in methods:
        if report.aggregates[m].flags:
            notes.append(f"{DISPLAY_NAMES.get(m, m)}: {', '.join(report.aggregates[m].flags)}")
    for m, reason in report.failures.items():
        notes.append(f"{DISPLAY_NAMES.get(m, m)} failed: {reason}")
    if notes:
        console.print("\n".join(notes), markup=False)
    return console.export_text()


def rows_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROW_COLUMNS)
    for r in report.rows:
        w.writerow([r.method, r.dataset_id, r.family, r.group,
                    repr(r.actual_f1), repr(r.estimated_f1), repr(r.abs_error), int(r.vacuous)])
    return buf.getvalue()


def aggregates_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AGGREGATE_COLUMNS)
    for agg in report.aggregates.values():
        w.writerow([agg.method, repr(agg.mae), repr(agg.rho), agg.n, ";".join(agg.flags)])
    for method, reason in report.failures.items():
        w.writerow([method, "", "", 0, f"failed: {reason}"])
    return buf.getvalue()


def write_report(report: EvalReport, out_dir: Path) -> List[Path]:
    """Write rows.csv, aggregates.csv, report.txt and report.json into out_dir."""
    report.check_consistency()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return [
        atomic_write_text(out_dir / "rows.csv", rows_csv(report)),
        atomic_write_text(out_dir / "aggregates.csv", aggregates_csv(report)),
        atomic_write_text(out_dir / "report.txt", render_table(report)),
        atomic_write_text(out_dir / "report.json", json.dumps(report.model_dump(mode="json"), indent=2) + "\n"),
    ]
