"""Comparison tables: methods by source->target pair, and the loss-term ablation grid."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .trainer import LOSS_TERMS, MetricsReport, read_report

log = logging.getLogger(__name__)

ARROW = "→"
TERM_HEADERS = {"dc": "L_dc", "mmd": "L_mmd", "mix": "L_mix"}


@dataclass
class Table:
    header: list
    rows: list  # list of lists, first cells are labels, the rest numbers or ""

    def to_markdown(self, digits: int = 2) -> str:
        def cell(v):
            return f"{v:.{digits}f}" if isinstance(v, float) else str(v)

        lines = ["| " + " | ".join(self.header) + " |",
                 "|" + "|".join("---" for _ in self.header) + "|"]
        lines += ["| " + " | ".join(cell(v) for v in row) + " |" for row in self.rows]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        for row in self.rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
        return buf.getvalue()


def pair_label(source: str, target: str) -> str:
    return f"{source}{ARROW}{target}"


def load_reports(run_dirs) -> list[tuple[Path, MetricsReport]]:
    """Read ``report.json`` from each directory; missing ones are logged and skipped."""
    found = []
    for d in run_dirs:
        path = Path(d) / "report.json"
        if not path.is_file():
            log.warning("no report in %s, skipping", d)
            continue
        found.append((Path(d), read_report(path)))
    return found


def _pair_values(report: MetricsReport) -> dict:
    return {pair_label(report.source, t): report.per_target[t]["mean"] for t in report.targets}


def results_table(reports) -> Table:
    """Rows are methods, columns every source->target pair seen, plus Average.

    Each row's Average is the mean of that row's own pair columns.
    """
    columns = []
    for r in reports:
        for p in _pair_values(r):
            if p not in columns:
                columns.append(p)
    rows = []
    for r in reports:
        vals = _pair_values(r)
        cells = [vals.get(p, "") for p in columns]
        avg = float(np.mean(list(vals.values()))) if vals else ""
        rows.append([r.method] + cells + [avg])
    return Table(["Method"] + columns + ["Average"], rows)


def terms_label(subset) -> str:
    return " + ".join(TERM_HEADERS[t] for t in LOSS_TERMS if t in subset)


def ablation_table(rows) -> Table:
    """One row per (term subset, aggregator): the active loss terms, the
    aggregator, per-pair accuracies and their average."""
    base = results_table([rep for _, _, rep in rows])
    header = ["Loss terms", "Aggregator"] + base.header[1:]
    out = [[terms_label(subset), agg] + brow[1:] for (subset, agg, _), brow in zip(rows, base.rows)]
    return Table(header, out)


def write_table(table: Table, out_dir, stem: str) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    md, cs = out / f"{stem}.md", out / f"{stem}.csv"
    md.write_text(table.to_markdown())
    cs.write_text(table.to_csv())
    return [md, cs]
