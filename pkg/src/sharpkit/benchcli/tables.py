"""Markdown/CSV rendering of result tables in the layout of the published tables."""

from __future__ import annotations

import csv
import enum
import io
import math
from typing import Sequence, Union

from ..modelzoo import SpecError
from .harness import RunRecord, TableRow

HEADERS = (
    "Model/Optimizer",
    "Test Accuracy (%)",
    "Training time (min)",
    "Top Hessian Eigenvalue",
    "Hessian Median",
    "Hessian Mean",
    "Hessian SD",
    "Hessian Trace",
)


class TableFormat(enum.Enum):
    MARKDOWN = "md"
    CSV = "csv"


def _trim(x: float, places: int) -> str:
    if math.isnan(x):
        return "nan"
    s = f"{x:.{places}f}"
    if "." in s:
        s = s.rstrip("0").rstrip(".")
    return "0" if s == "-0" else s


def fmt_accuracy(x: float) -> str:
    """One decimal, printed as in the source tables (``84``, ``80.2``)."""
    return _trim(x, 1)


def fmt_minutes(x: float) -> str:
    return _trim(x, 2)


def fmt_metric(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.2f}"


def row_cells(row: TableRow) -> list[str]:
    return [
        row.label,
        fmt_accuracy(row.test_accuracy_pct),
        fmt_minutes(row.training_time_min),
        fmt_metric(row.top_eigenvalue),
        fmt_metric(row.hessian_median),
        fmt_metric(row.hessian_mean),
        fmt_metric(row.hessian_sd),
        fmt_metric(row.hessian_trace),
    ]


def render_table(
    records: Sequence[Union[TableRow, RunRecord]],
    format: Union[TableFormat, str] = TableFormat.MARKDOWN,
) -> str:
    if not records:
        raise SpecError("cannot render an empty table")
    fmt = TableFormat(format)
    rows = [r if isinstance(r, TableRow) else TableRow.from_record(r) for r in records]
    cells = [row_cells(r) for r in rows]
    if fmt is TableFormat.CSV:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(HEADERS)
        writer.writerows(cells)
        return buf.getvalue()
    lines = [
        "| " + " | ".join(HEADERS) + " |",
        "|" + "|".join("---" for _ in HEADERS) + "|",
    ]
    lines += ["| " + " | ".join(c) + " |" for c in cells]
    return "\n".join(lines) + "\n"


def parse_csv_table(text: str) -> list[TableRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != HEADERS:
        raise SpecError(f"unexpected table header {header}")
    return [TableRow(r[0], *(float(x) for x in r[1:])) for r in reader if r]
